"""
The two control channels and their exact identities
===================================================

Appearance control attends over the concatenation of self features and frozen
reference features; design control lets dimension tokens query the spatial
map and add a pooled correction. Both obey sharp identities: duplicated keys
change nothing, uniform prompt weights equal no weighting, and a fresh model
ignores design tokens byte-for-byte.
"""

import numpy as np

from roomdiff import appearance_context_attention, design_control_block, tiny_config, init_params
from roomdiff.control_denoiser import FeatureMap, attention
from roomdiff.tensor_core import Rng

rng = Rng(3)
proj = {
    "W_q": rng.spawn("q").normal((6, 4)),
    "W_k": rng.spawn("k").normal((6, 4)),
    "W_v": rng.spawn("v").normal((6, 4)),
    "W_o": rng.spawn("o").normal((4, 6)),
}

# duplicating every key/value row leaves attention unchanged
q = rng.spawn("qin").normal((5, 6))
kv = rng.spawn("kv").normal((7, 6))
base = attention(q, kv, proj)
doubled = attention(q, np.concatenate([kv, kv]), proj)
print("duplication invariance:", np.abs(doubled - base).max())

# uniform per-key bias cancels inside softmax
biased = attention(q, kv, proj, logit_bias=np.full(7, 2.34))
print("uniform-bias invariance:", np.abs(biased - base).max())

# with the reference equal to the features themselves, the concatenated
# attention collapses to plain self-attention
h = FeatureMap(layer=0, features=rng.spawn("h").normal((6, 3, 3)))
same = appearance_context_attention(h, h, proj)
alone = appearance_context_attention(h, None, proj)
print("self-as-reference collapse:", np.abs(same.features - alone.features).max())

# a freshly initialized design site is an exact no-op: its output
# projection starts at zero so control fades in only through training
cfg = tiny_config()
params = init_params(cfg, seed=0)
site = {"W_q": params.values["dec0.design.wq"],
        "W_k": params.values["dec0.design.wk"],
        "W_v": params.values["dec0.design.wv"],
        "W_o": params.values["dec0.design.wo"]}
hmap = FeatureMap(layer=0, features=rng.spawn("hd").normal((cfg.base, 4, 4)))
tokens = rng.spawn("tok").normal((3, cfg.d_text))
out = design_control_block(hmap, tokens, site)
print("identity at init, byte-exact:",
      out.features.tobytes() == hmap.features.tobytes())
