"""Acceptance gate: ten numbered criteria, one verdict line each.

Every test pins its tolerance and runtime budget, appends a PASS or FAIL
line to the terminal summary, and asserts on it.  Criteria 8 and 10 run
the same seeded 2000-step training pipeline twice (once each) and
dominate the suite's runtime at roughly ten minutes per pass.
"""

import hashlib
import json
import tempfile
import time
import warnings
from pathlib import Path

import numpy as np
import pytest
import scipy.linalg

from conftest import ACCEPTANCE
from roomdiff.checkpoint import Checkpoint, checkpoint_bytes
from roomdiff.cli import build_gradcheck_problem
from roomdiff.control_denoiser import (
    FeatureMap,
    attention,
    design_control_block,
    desk_config,
    init_params,
    tiny_config,
)
from roomdiff.designhelper_mini import (
    KINDS,
    FurnitureItem,
    SceneSpec,
    describe_scene,
    generate_record,
    generate_scene,
    measure_layout,
    rasterize,
    write_record,
)
from roomdiff.diffusion_process import build_schedule, elbo, forward_step
from roomdiff.evaluator import (
    FeatureStats,
    frechet_distance,
    inception_score_from_probs,
    retrieval_recall,
)
from roomdiff.latent_codec import Codec
from roomdiff.prompt_encoder import (
    PatchScorer,
    Vocabulary,
    make_embedding_table,
    tokenize,
    tokenize_and_embed,
    train_patch_scorer,
    weight_prompt,
)
from roomdiff.sampler import SampleRequest, ancestral_sample
from roomdiff.tensor_core import Rng
from roomdiff.trainer import ConditioningBuilder, TrainConfig, gradient_check, train


def _verdict(num, name, ok, detail):
    line = f"criterion {num:02d} {'PASS' if ok else 'FAIL'} {name}: {detail}"
    ACCEPTANCE.append(line)
    assert ok, line


# ---------------------------------------------------------------------------
# criterion 1: analytic gradients against central finite differences


def test_criterion_01_gradient_check_tiny():
    t0 = time.monotonic()
    params, loss_fn = build_gradcheck_problem("tiny", seed=0)
    n_trainable = sum(params.values[n].size for n in params.trainable_names())
    report = gradient_check(params, loss_fn, subset_size=200, eps=1e-5, seed=0)
    dt = time.monotonic() - t0
    ok = report["max_rel_err"] < 1e-4 and n_trainable <= 5000 and dt < 60.0
    _verdict(
        1, "gradient check, tiny preset", ok,
        f"max rel err {report['max_rel_err']:.3e} over {report['checked']} coords, "
        f"{n_trainable} trainable params, {dt:.1f}s",
    )


# ---------------------------------------------------------------------------
# criterion 2: simulated forward chain against the closed-form marginal


def test_criterion_02_chain_matches_marginal():
    t0 = time.monotonic()
    sched = build_schedule(100)
    n = 10_000
    z0 = 1.25
    tested = (1, 10, 50, 100)
    rng = Rng(2026)
    z = np.full(n, z0)
    worst = 0.0
    for t in range(1, sched.T + 1):
        z = forward_step(z, t, sched, rng.spawn("chain", t))
        if t in tested:
            abar = sched.abar(t)
            mean_exact = np.sqrt(abar) * z0
            var_exact = 1.0 - abar
            se_mean = np.sqrt(var_exact / n)
            se_var = var_exact * np.sqrt(2.0 / (n - 1))
            worst = max(
                worst,
                abs(z.mean() - mean_exact) / se_mean,
                abs(z.var(ddof=1) - var_exact) / se_var,
            )
    dt = time.monotonic() - t0
    ok = worst < 3.0 and dt < 60.0
    _verdict(
        2, "forward chain matches marginal", ok,
        f"worst moment deviation {worst:.2f} sigma at t in {tested}, "
        f"{n} trials each, {dt:.1f}s",
    )


# ---------------------------------------------------------------------------
# criterion 3: ELBO sits below the closed-form log-likelihood on the toy


def test_criterion_03_elbo_below_closed_form_ll():
    t0 = time.monotonic()
    sched = build_schedule(3, 0.90, 0.99)

    def denoiser(z, t):
        # optimal linear noise predictor for unit-Gaussian data
        return np.sqrt(1.0 - sched.abar(t)) * z

    # variance of the model marginal under that denoiser: run the reverse
    # recurrence from the N(0,1) prior down to t=1
    v = 1.0
    for t in range(sched.T, 0, -1):
        if t >= 2:
            step_var = sched.bt(t) * (1.0 - sched.abar(t - 1)) / (1.0 - sched.abar(t))
        else:
            step_var = sched.bt(1)
        v = sched.at(t) * v + step_var

    rng = Rng(33)
    z0s = rng.spawn("data").normal((64,))
    gaps = []
    min_kl = np.inf
    for i, z0 in enumerate(z0s):
        rep = elbo(np.array(z0), denoiser, sched, rng.spawn("mc", i), mc_samples=48)
        ll = -0.5 * (np.log(2.0 * np.pi * v) + z0 * z0 / v)
        gaps.append(ll - rep.total)
        min_kl = min(min_kl, min(rep.kl_terms))
    gaps = np.array(gaps)
    sem = gaps.std(ddof=1) / np.sqrt(gaps.size)
    dt = time.monotonic() - t0
    ok = gaps.mean() > -3.0 * sem and min_kl >= -1e-10 and dt < 30.0
    _verdict(
        3, "toy ELBO below closed-form log-likelihood", ok,
        f"mean gap {gaps.mean():+.4f} (sem {sem:.4f}), min KL {min_kl:+.2e}, {dt:.1f}s",
    )


# ---------------------------------------------------------------------------
# criterion 4: attention identities


def test_criterion_04_attention_identities():
    t0 = time.monotonic()
    rng = Rng(4)
    proj = {
        "W_q": rng.spawn("q").normal((6, 4)),
        "W_k": rng.spawn("k").normal((6, 4)),
        "W_v": rng.spawn("v").normal((6, 4)),
        "W_o": rng.spawn("o").normal((4, 6)),
    }
    q = rng.spawn("qin").normal((5, 6))
    kv = rng.spawn("kv").normal((7, 6))
    base = attention(q, kv, proj)
    dup_err = np.abs(attention(q, np.concatenate([kv, kv]), proj) - base).max()
    bias_err = np.abs(attention(q, kv, proj, logit_bias=np.full(7, 2.34)) - base).max()

    cfg = tiny_config()
    params = init_params(cfg, seed=0)
    site = {
        "W_q": params.values["dec0.design.wq"],
        "W_k": params.values["dec0.design.wk"],
        "W_v": params.values["dec0.design.wv"],
        "W_o": params.values["dec0.design.wo"],
    }
    hmap = FeatureMap(layer=0, features=rng.spawn("hd").normal((cfg.base, 4, 4)))
    tokens = rng.spawn("tok").normal((3, cfg.d_text))
    out = design_control_block(hmap, tokens, site)
    byte_exact = out.features.tobytes() == hmap.features.tobytes()
    dt = time.monotonic() - t0
    ok = dup_err <= 1e-12 and bias_err <= 1e-12 and byte_exact and dt < 5.0
    _verdict(
        4, "attention identities", ok,
        f"duplication {dup_err:.2e}, uniform bias {bias_err:.2e}, "
        f"design no-op at init byte-exact {byte_exact}, {dt:.1f}s",
    )


# ---------------------------------------------------------------------------
# criterion 5: codec roundtrip exactness


def test_criterion_05_codec_roundtrip():
    t0 = time.monotonic()
    rng = Rng(55)
    images = [rasterize(generate_scene(rng.spawn("scene", i))) for i in range(1000)]
    codec = Codec.create(4, seed=0).fit(images[:128])
    worst = 0.0
    for img in images:
        back = codec.decode(codec.encode(img))
        worst = max(worst, float(np.abs(back - img).max()))
    dt = time.monotonic() - t0
    ok = worst < 1e-9 and dt < 10.0
    _verdict(
        5, "codec roundtrip", ok,
        f"max abs error {worst:.2e} over 1000 seeded images, {dt:.1f}s",
    )


# ---------------------------------------------------------------------------
# criterion 6: metric oracles


def _brute_force_recall(image_embs, text_embs, ks):
    a = image_embs / np.linalg.norm(image_embs, axis=1, keepdims=True)
    b = text_embs / np.linalg.norm(text_embs, axis=1, keepdims=True)
    out = {}
    for name, left, right in (("image_to_text", a, b), ("text_to_image", b, a)):
        hits = {k: 0 for k in ks}
        n = left.shape[0]
        for i in range(n):
            scores = [float(left[i] @ right[j]) for j in range(n)]
            true = scores[i]
            rank = sum(
                1 for j, s in enumerate(scores) if s > true or (s == true and j < i)
            )
            for k in ks:
                if rank < k:
                    hits[k] += 1
        out[name] = {k: 100.0 * hits[k] / n for k in ks}
    return out


def test_criterion_06_metric_oracles():
    t0 = time.monotonic()
    rng = Rng(66)
    d = 6
    mu1 = rng.spawn("mu1").normal((d,))
    mu2 = rng.spawn("mu2").normal((d,))
    a1 = rng.spawn("c1").normal((d, d))
    a2 = rng.spawn("c2").normal((d, d))
    cov1 = a1 @ a1.T / d + 0.1 * np.eye(d)
    cov2 = a2 @ a2.T / d + 0.1 * np.eye(d)
    s1 = FeatureStats(mean=mu1, cov=cov1)
    s2 = FeatureStats(mean=mu2, cov=cov2)

    err_same = abs(frechet_distance(s1, FeatureStats(mean=mu1.copy(), cov=cov1.copy())))
    eye = np.eye(d)
    err_eye = abs(
        frechet_distance(FeatureStats(mean=mu1, cov=eye), FeatureStats(mean=mu2, cov=eye))
        - float((mu1 - mu2) @ (mu1 - mu2))
    )
    root1 = scipy.linalg.sqrtm(cov1)
    cross = scipy.linalg.sqrtm(root1 @ cov2 @ root1)
    want = float(
        (mu1 - mu2) @ (mu1 - mu2)
        + np.trace(cov1) + np.trace(cov2) - 2.0 * np.trace(np.real(cross))
    )
    err_derived = abs(frechet_distance(s1, s2) - want)

    emb_i = rng.spawn("ei").normal((50, 8))
    emb_t = emb_i + 0.5 * rng.spawn("et").normal((50, 8))
    table = retrieval_recall(emb_i, emb_t, ks=(1, 5, 10))
    brute = _brute_force_recall(emb_i, emb_t, ks=(1, 5, 10))
    retrieval_exact = (
        table.image_to_text == brute["image_to_text"]
        and table.text_to_image == brute["text_to_image"]
    )

    err_is_flat = abs(inception_score_from_probs(np.full((40, 5), 0.2)) - 1.0)
    err_is_onehot = abs(inception_score_from_probs(np.tile(np.eye(5), (8, 1))) - 5.0)

    dt = time.monotonic() - t0
    ok = (
        err_same <= 1e-9
        and err_eye <= 1e-9
        and err_derived <= 1e-6
        and retrieval_exact
        and err_is_flat <= 1e-9
        and err_is_onehot <= 1e-9
        and dt < 30.0
    )
    _verdict(
        6, "metric oracles", ok,
        f"frechet same {err_same:.1e} / identity-cov {err_eye:.1e} / "
        f"vs scipy {err_derived:.1e}, retrieval exact {retrieval_exact}, "
        f"IS flat {err_is_flat:.1e} / one-hot {err_is_onehot:.1e}, {dt:.1f}s",
    )


# ---------------------------------------------------------------------------
# criterion 7: generate -> rasterize -> measure roundtrip


_SCENE_DIGESTS = {}


def _measured_scene_digest(n_scenes=1000, seed=77):
    digest = hashlib.blake2b(digest_size=16)
    mismatches = 0
    n_items = 0
    rng = Rng(seed)
    for i in range(n_scenes):
        spec = generate_scene(rng.spawn("scene", i))
        img = rasterize(spec)
        digest.update(img.tobytes())
        for item in spec.furniture:
            got = measure_layout(img, item.kind)
            n_items += 1
            if got is None or got["w"] != item.w or got["h"] != item.h:
                mismatches += 1
    return digest.hexdigest(), mismatches, n_items


def test_criterion_07_measurement_roundtrip():
    t0 = time.monotonic()
    digest, mismatches, n_items = _measured_scene_digest()
    _SCENE_DIGESTS["first"] = digest
    dt = time.monotonic() - t0
    ok = mismatches == 0 and dt < 30.0
    _verdict(
        7, "measurement oracle roundtrip", ok,
        f"{n_items} furniture items exact on 1000 scenes "
        f"({mismatches} mismatches), {dt:.1f}s",
    )


# ---------------------------------------------------------------------------
# criteria 8 and 10: seeded end-to-end training efficacy, run twice

STYLES3 = ("modern", "nordic", "vintage")
SPACES3 = ("living room", "study", "bedroom")
CORPUS_SEED = 8801
TRAIN_STEPS = 2000


def _corpus_constraints(space):
    # one anchor item per scene with its free dimensions pinned, so every
    # detailed prompt fully determines its image; only the living-room sofa
    # keeps a free width, which is exactly what the evaluation measures
    base = {"style": list(STYLES3), "space_type": space, "n_furniture": (1, 1)}
    if space == "living room":
        base["furniture"] = [{"kind": "sofa", "h": 1}]
    elif space == "study":
        base["furniture"] = [{"kind": "desk", "w": 2, "h": 1}]
    else:
        base["furniture"] = [{"kind": "bed", "w": 2, "h": 2}]
    return base


def _efficacy_pipeline():
    start = time.monotonic()
    records = [
        generate_record(CORPUS_SEED, "train", i, _corpus_constraints(SPACES3[i % 3]), 0.25, 32)
        for i in range(256)
    ]
    with tempfile.TemporaryDirectory() as tmp:
        root = Path(tmp)
        for i, (spec, doc, img) in enumerate(records):
            write_record(root, "train", i, spec, doc, img)
        digest = hashlib.blake2b(digest_size=16)
        for path in sorted(root.rglob("*")):
            if path.is_file():
                digest.update(str(path.relative_to(root)).encode())
                digest.update(path.read_bytes())
        corpus_digest = digest.hexdigest()

    images = [img for _spec, _doc, img in records]
    codec = Codec.create(4, seed=0).fit(images)
    vocab = Vocabulary.load()
    table = make_embedding_table(vocab, d_text=32, seed=0)
    scorer_corpus = [
        (p, [bool(vocab.design_term[vocab.id_of(tok)]) for tok in tokenize(p)])
        for p in sorted({doc.prompt for _spec, doc, _img in records})
    ]
    scorer, _ = train_patch_scorer(
        scorer_corpus, PatchScorer.create(32, seed=0), vocab, table, epochs=200
    )
    builder = ConditioningBuilder(codec, vocab, table, scorer)
    sched = build_schedule(50, 2e-3, 0.4)
    params = init_params(desk_config(codec.channels, 8), seed=0)
    items = []
    for idx, (spec, doc, img) in enumerate(records):
        # a low reference rate keeps the appearance path exercised while
        # forcing most of the conditional signal through the prompt
        use_ref = Rng(0).spawn("ref-flag", idx).uniform() < 0.125
        items.append((img, doc.prompt, img if use_ref else None, spec))
    tcfg = TrainConfig(lr=2e-3, batch_size=16, steps=TRAIN_STEPS, seed=0)
    params, curve = train(items, tcfg, params, sched, builder)
    losses = np.array([loss for _step, loss in curve])
    first50 = float(losses[:50].mean())
    last50 = float(losses[-50:].mean())

    color = 3 + KINDS.index("sofa")
    errs_cond, errs_unc = [], []
    for i in range(64):
        w = 2 + (i % 3)
        style = STYLES3[(i // 3) % 3]
        spec = SceneSpec(
            "living room", style,
            furniture=[FurnitureItem("sofa", 0, 0, w, 1, color)],
        )
        p_cond, _ = describe_scene(spec, detailed=True)
        p_unc, _ = describe_scene(spec, detailed=False)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            img_c = ancestral_sample(
                SampleRequest(p_cond, seed=1000 + i), params, sched, codec, builder
            )[0]
            img_u = ancestral_sample(
                SampleRequest(p_unc, seed=1000 + i), params, sched, codec, builder
            )[0]
        got_c = measure_layout(img_c, "sofa")
        got_u = measure_layout(img_u, "sofa")
        # an unmeasurable sample scores the grid-size error
        errs_cond.append(abs(got_c["w"] - w) if got_c else 8.0)
        errs_unc.append(abs(got_u["w"] - w) if got_u else 8.0)
    errs_cond = np.array(errs_cond)
    errs_unc = np.array(errs_unc)
    diffs = errs_unc - errs_cond
    boot_idx = Rng(4242).spawn("boot").integers(0, diffs.size, (10_000, diffs.size))
    boot_means = diffs[boot_idx].mean(axis=1)
    ci_low, ci_high = np.percentile(boot_means, [2.5, 97.5])

    report = {
        "n_pairs": int(diffs.size),
        "mae_conditioned": float(errs_cond.mean()),
        "mae_unconditional": float(errs_unc.mean()),
        "ci_low": float(ci_low),
        "ci_high": float(ci_high),
        "loss_first50": first50,
        "loss_last50": last50,
    }
    tensors = {f"model.{name}": np.asarray(arr) for name, arr in sorted(params.values.items())}
    tensors["codec.mixing"] = codec.mixing
    tensors["codec.offset"] = codec.offset
    tensors["codec.scale"] = codec.scale
    ckpt = Checkpoint(
        config={"steps": TRAIN_STEPS, "corpus_seed": CORPUS_SEED},
        tensors=tensors,
        rng_state=Rng(0).state(),
    )
    return {
        "corpus_digest": corpus_digest,
        "checkpoint": checkpoint_bytes(ckpt),
        "report": report,
        "report_blob": json.dumps(report, sort_keys=True, separators=(",", ":")).encode(),
        "elapsed": time.monotonic() - start,
    }


@pytest.fixture(scope="module")
def efficacy_run():
    return _efficacy_pipeline()


def test_criterion_08_training_efficacy(efficacy_run):
    rep = efficacy_run["report"]
    loss_ok = rep["loss_last50"] <= 0.5 * rep["loss_first50"]
    mae_ok = rep["mae_conditioned"] < rep["mae_unconditional"]
    ci_ok = rep["ci_low"] > 0.0
    time_ok = efficacy_run["elapsed"] < 1800.0
    ok = loss_ok and mae_ok and ci_ok and time_ok
    _verdict(
        8, "end-to-end training efficacy", ok,
        f"loss {rep['loss_first50']:.0f} -> {rep['loss_last50']:.0f}, "
        f"width MAE cond {rep['mae_conditioned']:.3f} vs unc {rep['mae_unconditional']:.3f}, "
        f"bootstrap CI [{rep['ci_low']:+.3f}, {rep['ci_high']:+.3f}], "
        f"{efficacy_run['elapsed'] / 60.0:.1f} min",
    )


# ---------------------------------------------------------------------------
# criterion 9: prompt weighting on held-out prompts


def _prompt_batch(seed, count):
    prompts = []
    rng = Rng(seed)
    for i in range(count):
        spec = generate_scene(rng.spawn("scene", i))
        detailed = rng.spawn("detail", i).uniform() < 0.75
        prompt, _doc = describe_scene(spec, detailed=detailed)
        prompts.append(prompt)
    return prompts


def test_criterion_09_prompt_weighting():
    vocab = Vocabulary.load()
    table = make_embedding_table(vocab, d_text=32, seed=0)
    corpus = [
        (p, [bool(vocab.design_term[vocab.id_of(tok)]) for tok in tokenize(p)])
        for p in _prompt_batch(901, 200)
    ]
    scorer, _ = train_patch_scorer(
        corpus, PatchScorer.create(32, seed=0), vocab, table, epochs=200
    )
    held_out = _prompt_batch(902, 100)
    design_weights, plain_weights = [], []
    worst_sum = 0.0
    for prompt in held_out:
        feats = weight_prompt(tokenize_and_embed(prompt, vocab, table), scorer)
        worst_sum = max(worst_sum, abs(float(feats.weights.sum()) - 1.0))
        for tid, weight in zip(feats.token_ids, feats.weights):
            (design_weights if vocab.design_term[tid] else plain_weights).append(weight)
    ratio = float(np.mean(design_weights) / np.mean(plain_weights))
    ok = ratio >= 1.5 and worst_sum <= 1e-9
    _verdict(
        9, "prompt patch weighting", ok,
        f"design/non-design weight ratio {ratio:.1f} over 100 held-out prompts, "
        f"worst sum deviation {worst_sum:.1e}",
    )


# ---------------------------------------------------------------------------
# criterion 10: byte-identical replay of criteria 7 and 8


def test_criterion_10_determinism(efficacy_run):
    digest_again, _mismatches, _n = _measured_scene_digest()
    second = _efficacy_pipeline()
    scenes_ok = digest_again == _SCENE_DIGESTS.get("first")
    corpus_ok = second["corpus_digest"] == efficacy_run["corpus_digest"]
    ckpt_ok = second["checkpoint"] == efficacy_run["checkpoint"]
    report_ok = second["report_blob"] == efficacy_run["report_blob"]
    ok = scenes_ok and corpus_ok and ckpt_ok and report_ok
    _verdict(
        10, "seeded replay is byte-identical", ok,
        f"scenes {scenes_ok}, corpus {corpus_ok}, checkpoint {ckpt_ok}, "
        f"report {report_ok}",
    )
