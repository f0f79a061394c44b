"""
End-to-end: corpus, training loop, ancestral sampling
=====================================================

A short run on a tiny constrained corpus. The loss starts near the latent
dimension count (an untrained model predicts no noise at all) and falls as
the denoiser picks up structure; sampling then walks the reverse chain from
pure noise to an image.
"""

import numpy as np

from roomdiff import (
    Codec,
    PatchScorer,
    SampleRequest,
    TrainConfig,
    Vocabulary,
    ancestral_sample,
    build_schedule,
    desk_config,
    generate_record,
    init_params,
    make_embedding_table,
    measure_layout,
    train,
    train_patch_scorer,
)
from roomdiff.prompt_encoder import tokenize
from roomdiff.trainer import ConditioningBuilder

# 64 living rooms, all containing a sofa, rendered at 32x32
con = {"space_type": "living room", "style": ["modern", "vintage"],
       "furniture": [{"kind": "sofa"}], "n_furniture": (1, 2)}
records = [generate_record(21, "demo", i, con, 0.25, 32) for i in range(64)]
images = [img for _s, _d, img in records]
prompts = [doc.prompt for _s, doc, _i in records]

codec = Codec.create(patch_size=4, seed=0).fit(images)
print(f"latents: {codec.channels} channels on an 8x8 grid")

vocab = Vocabulary.load()
table = make_embedding_table(vocab, d_text=32, seed=0)
scorer = PatchScorer.create(32, seed=0)
labels = [(p, [bool(vocab.design_term[vocab.id_of(t)]) for t in tokenize(p)])
          for p in sorted(set(prompts))]
scorer, _ = train_patch_scorer(labels, scorer, vocab, table, epochs=150)
builder = ConditioningBuilder(codec, vocab, table, scorer)

# betas scaled by 1/T so the chain ends at abar ~ 0; sampling starts from
# pure noise, so the forward endpoint must actually reach it
schedule = build_schedule(T=50, beta_start=2e-3, beta_end=0.4)
params = init_params(desk_config(codec.channels, grid=8), seed=0)
dataset = [(img, p, None, s) for (s, _d, img), p in zip(records, prompts)]

params, curve = train(dataset, TrainConfig(steps=300, batch_size=8, seed=0),
                      params, schedule, builder)
losses = [l for _, l in curve]
print(f"loss: first 25 steps {np.mean(losses[:25]):.0f} "
      f"-> last 25 steps {np.mean(losses[-25:]):.0f}")

# sample two layouts for one prompt; same seed means identical pixels
req = SampleRequest(prompt="a modern living room with a sofa of width 3 and height 1",
                    seed=9, count=2)
samples = ancestral_sample(req, params, schedule, codec, builder)
print("sampled", len(samples), "images of shape", samples[0].shape)
m = measure_layout(samples[0], "sofa")
print("sofa measured in sample:", m, "(300 steps is a warm-up, not convergence)")
