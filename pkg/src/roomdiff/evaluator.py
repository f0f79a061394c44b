"""Distribution, quality, and alignment metrics over layout corpora.

All feature extractors are small networks trained here, from scratch, on the
procedural corpus: a dual image/text encoder for Frechet distance, similarity,
and retrieval, and a space-type classifier for the inception-style score.
Published metric values obtained with large pretrained backbones are therefore
not comparable; what this module guarantees instead is that each metric
matches its closed-form or brute-force oracle on synthetic inputs.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from . import _autograd as ag
from .designhelper_mini import SPACE_TYPES
from .errors import ConfigError, DomainError, ShapeError
from .prompt_encoder import Vocabulary, make_embedding_table, tokenize
from .tensor_core import Rng, psd_sqrt, require_finite

EMBED_DIM = 32


# ---------------------------------------------------------------------------
# feature statistics and Frechet distance


@dataclass(frozen=True)
class FeatureStats:
    """Gaussian fit (mean, covariance) of a feature cloud."""

    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=np.float64)
        cov = np.asarray(self.cov, dtype=np.float64)
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)
        if mean.ndim != 1 or cov.shape != (mean.size, mean.size):
            raise ShapeError(f"FeatureStats: mean {mean.shape} vs cov {cov.shape}")
        require_finite("FeatureStats.mean", mean)
        require_finite("FeatureStats.cov", cov)
        if np.abs(cov - cov.T).max() > 1e-9:
            raise DomainError("FeatureStats: covariance not symmetric within 1e-9")
        if np.linalg.eigvalsh(cov).min() < -1e-9:
            raise DomainError("FeatureStats: covariance not PSD within 1e-9")


def feature_stats(features: np.ndarray) -> FeatureStats:
    """Mean and unbiased covariance of rows; needs at least two rows."""
    feats = np.asarray(features, dtype=np.float64)
    if feats.ndim != 2 or feats.shape[0] < 2:
        raise ShapeError(f"feature_stats: want (n>=2, d), got {feats.shape}")
    require_finite("features", feats)
    cov = np.cov(feats, rowvar=False, ddof=1)
    cov = np.atleast_2d((cov + cov.T) / 2.0)
    return FeatureStats(mean=feats.mean(axis=0), cov=cov)


def frechet_distance(a: FeatureStats, b: FeatureStats) -> float:
    """||mu_a - mu_b||^2 + Tr(S_a + S_b - 2 (S_a^1/2 S_b S_a^1/2)^1/2)."""
    if a.mean.shape != b.mean.shape:
        raise ShapeError(
            f"frechet_distance: dimension mismatch {a.mean.shape} vs {b.mean.shape}"
        )
    root_a = psd_sqrt(a.cov)
    inner = root_a @ b.cov @ root_a
    inner = (inner + inner.T) / 2.0  # kill fp asymmetry before the second root
    cross = psd_sqrt(inner)
    value = float(
        (a.mean - b.mean) @ (a.mean - b.mean)
        + np.trace(a.cov)
        + np.trace(b.cov)
        - 2.0 * np.trace(cross)
    )
    if value < -1e-6:
        raise DomainError(f"frechet_distance: negative value {value:g}")
    return max(value, 0.0)


# ---------------------------------------------------------------------------
# small trained networks: shared pieces


def _unit_rows(x: np.ndarray) -> np.ndarray:
    norms = np.sqrt((x * x).sum(axis=1, keepdims=True))
    return x / np.maximum(norms, 1e-12)


def _l2_rows_var(h):
    sq = ag.sum_(ag.mul(h, h), axis=1, keepdims=True)
    return ag.div(h, ag.sqrt(ag.add(sq, 1e-24)))


def _stack_images(images) -> np.ndarray:
    arr = np.asarray(images, dtype=np.float64)
    if arr.ndim == 3:
        arr = arr[None]
    if arr.ndim != 4 or arr.shape[-1] != 3:
        raise ShapeError(f"images: want (n, h, w, 3), got {arr.shape}")
    require_finite("images", arr)
    if arr.min() < -1e-9 or arr.max() > 1 + 1e-9:
        raise DomainError("images: values outside [0, 1]")
    return arr.transpose(0, 3, 1, 2)  # to (n, 3, h, w)


def _conv_init(rng: Rng, c_out: int, c_in: int, k: int) -> np.ndarray:
    fan_in = c_in * k * k
    return rng.normal((c_out, c_in, k, k)) * np.sqrt(2.0 / fan_in)


def _adam_update(values, grads, m, v, step, lr, b1=0.9, b2=0.999, eps=1e-8):
    for name, g in grads.items():
        m[name] = b1 * m[name] + (1 - b1) * g
        v[name] = b2 * v[name] + (1 - b2) * g * g
        mhat = m[name] / (1 - b1**step)
        vhat = v[name] / (1 - b2**step)
        values[name] = values[name] - lr * mhat / (np.sqrt(vhat) + eps)


def _vars(values: dict) -> dict:
    return {k: ag.Var(v, requires_grad=True) for k, v in values.items()}


def _grads(pv: dict) -> dict:
    return {k: (np.zeros_like(var.data) if var.grad is None else var.grad) for k, var in pv.items()}


# ---------------------------------------------------------------------------
# dual image/text encoder


@dataclass
class DualEncoder:
    """Paired image and text towers mapping into one unit sphere in R^32.

    The image tower is three stride-2 convolutions with a linear head; the
    text tower mean-pools fixed token embeddings through a linear head.  Both
    outputs are L2-normalized, so dot products are cosines.
    """

    params: dict
    vocab: Vocabulary
    table: np.ndarray

    def embed_images(self, images) -> np.ndarray:
        x = _stack_images(images)
        with ag.no_grad():
            return _image_tower({k: ag.Var(v) for k, v in self.params.items()}, ag.Var(x)).data

    def embed_texts(self, prompts) -> np.ndarray:
        pooled = _pool_prompts(prompts, self.vocab, self.table)
        with ag.no_grad():
            return _text_tower({k: ag.Var(v) for k, v in self.params.items()}, ag.Var(pooled)).data


def _image_tower(p: dict, x):
    h = ag.silu(ag.conv2d(x, p["img.c1.w"], p["img.c1.b"], stride=2, pad=1))
    h = ag.silu(ag.conv2d(h, p["img.c2.w"], p["img.c2.b"], stride=2, pad=1))
    h = ag.silu(ag.conv2d(h, p["img.c3.w"], p["img.c3.b"], stride=2, pad=1))
    h = ag.mean_(h, axis=(2, 3))
    h = ag.add(ag.matmul(h, p["img.proj.w"]), p["img.proj.b"])
    return _l2_rows_var(h)


def _text_tower(p: dict, pooled):
    h = ag.add(ag.matmul(pooled, p["txt.w1"]), p["txt.b1"])
    h = ag.silu(h)
    h = ag.add(ag.matmul(h, p["txt.w2"]), p["txt.b2"])
    return _l2_rows_var(h)


def _pool_prompts(prompts, vocab: Vocabulary, table: np.ndarray) -> np.ndarray:
    rows = []
    for prompt in prompts:
        ids = [vocab.id_of(tok) for tok in tokenize(prompt)]
        rows.append(table[ids].mean(axis=0))
    return np.asarray(rows, dtype=np.float64)


def _dual_init(rng: Rng, d_text: int) -> dict:
    values = {
        "img.c1.w": _conv_init(rng.spawn("c1"), 8, 3, 3),
        "img.c1.b": np.zeros(8),
        "img.c2.w": _conv_init(rng.spawn("c2"), 16, 8, 3),
        "img.c2.b": np.zeros(16),
        "img.c3.w": _conv_init(rng.spawn("c3"), EMBED_DIM, 16, 3),
        "img.c3.b": np.zeros(EMBED_DIM),
        "img.proj.w": rng.spawn("proj").normal((EMBED_DIM, EMBED_DIM)) / np.sqrt(EMBED_DIM),
        "img.proj.b": np.zeros(EMBED_DIM),
        "txt.w1": rng.spawn("tw1").normal((d_text, EMBED_DIM)) / np.sqrt(d_text),
        "txt.b1": np.zeros(EMBED_DIM),
        "txt.w2": rng.spawn("tw2").normal((EMBED_DIM, EMBED_DIM)) / np.sqrt(EMBED_DIM),
        "txt.b2": np.zeros(EMBED_DIM),
    }
    return values


def train_dual_encoder(
    pairs,
    vocab: Vocabulary | None = None,
    *,
    steps: int = 1500,
    batch_size: int = 32,
    temperature: float = 0.07,
    lr: float = 3e-3,
    seed: int = 0,
) -> DualEncoder:
    """Contrastive training on (image, prompt) pairs.

    Each step draws a batch, embeds both sides, and minimizes the symmetric
    cross-entropy of the scaled cosine logit matrix against the diagonal.
    """
    if temperature <= 0:
        raise ConfigError(f"temperature must be positive, got {temperature}")
    if batch_size < 2:
        raise ConfigError(f"batch_size must be >= 2, got {batch_size}")
    pairs = list(pairs)
    if len(pairs) < batch_size:
        raise ConfigError(f"need at least {batch_size} pairs, got {len(pairs)}")
    if vocab is None:
        vocab = Vocabulary.load()
    table = make_embedding_table(vocab, d_text=EMBED_DIM, seed=seed)
    rng = Rng(seed).spawn("dual-encoder")
    values = _dual_init(rng.spawn("init"), table.shape[1])
    images = _stack_images([img for img, _ in pairs])
    pooled = _pool_prompts([prompt for _, prompt in pairs], vocab, table)
    m = {k: np.zeros_like(v) for k, v in values.items()}
    v = {k: np.zeros_like(vv) for k, vv in values.items()}
    eye = ag.Var(np.eye(batch_size))
    for step in range(1, steps + 1):
        idx = rng.spawn("batch", step).shuffled(len(pairs))[:batch_size]
        pv = _vars(values)
        za = _image_tower(pv, ag.Var(images[idx]))
        zb = _text_tower(pv, ag.Var(pooled[idx]))
        logits = ag.mul(ag.matmul(za, ag.transpose(zb, (1, 0))), 1.0 / temperature)
        li2t = ag.neg(ag.sum_(ag.mul(ag.log(ag.softmax_last(logits)), eye)))
        lt2i = ag.neg(ag.sum_(ag.mul(ag.log(ag.softmax_last(ag.transpose(logits, (1, 0)))), eye)))
        loss = ag.mul(ag.add(li2t, lt2i), 0.5 / batch_size)
        ag.backward(loss)
        _adam_update(values, _grads(pv), m, v, step, lr)
    return DualEncoder(params=values, vocab=vocab, table=table)


# ---------------------------------------------------------------------------
# space-type classifier and inception-style score


@dataclass
class SpaceClassifier:
    """Conv classifier from a layout raster to its space type.

    `accuracy` is the held-out accuracy measured at training time; scores
    computed with a classifier below 0.9 are flagged unreliable.
    """

    params: dict
    classes: tuple
    accuracy: float

    def predict_probs(self, images) -> np.ndarray:
        x = _stack_images(images)
        with ag.no_grad():
            logits = _classifier_tower({k: ag.Var(v) for k, v in self.params.items()}, ag.Var(x)).data
        shifted = logits - logits.max(axis=1, keepdims=True)
        expd = np.exp(shifted)
        return expd / expd.sum(axis=1, keepdims=True)


def _classifier_tower(p: dict, x):
    # first conv is 4x4 stride 4: one output position per scene grid cell
    h = ag.silu(ag.conv2d(x, p["cls.c1.w"], p["cls.c1.b"], stride=4, pad=0))
    h = ag.silu(ag.conv2d(h, p["cls.c2.w"], p["cls.c2.b"], stride=1, pad=0))
    h = ag.reshape(h, (h.shape[0], int(np.prod(h.shape[1:]))))
    return ag.add(ag.matmul(h, p["cls.out.w"]), p["cls.out.b"])


def _classifier_init(rng: Rng, n_classes: int, flat: int) -> dict:
    return {
        "cls.c1.w": _conv_init(rng.spawn("c1"), 16, 3, 4),
        "cls.c1.b": np.zeros(16),
        "cls.c2.w": _conv_init(rng.spawn("c2"), 16, 16, 1),
        "cls.c2.b": np.zeros(16),
        "cls.out.w": rng.spawn("out").normal((flat, n_classes)) / np.sqrt(flat),
        "cls.out.b": np.zeros(n_classes),
    }


def train_space_classifier(
    pairs,
    *,
    steps: int = 2500,
    batch_size: int = 32,
    lr: float = 5e-3,
    seed: int = 0,
    holdout_fraction: float = 0.2,
    classes: tuple = SPACE_TYPES,
) -> SpaceClassifier:
    """Cross-entropy training on (image, space_type) pairs; returns the
    classifier with its held-out accuracy attached.

    The wide flattened head memorizes small corpora, so reaching a reliable
    classifier (>= 0.9 held out) wants a few thousand pairs; the head gets
    mild decoupled weight decay and the learning rate steps down for the
    final third of training.
    """
    pairs = list(pairs)
    if batch_size < 1:
        raise ConfigError(f"batch_size must be >= 1, got {batch_size}")
    if not 0.0 < holdout_fraction < 1.0:
        raise ConfigError(f"holdout_fraction must be in (0,1), got {holdout_fraction}")
    index = {name: i for i, name in enumerate(classes)}
    labels = np.array([index[space] for _, space in pairs])
    images = _stack_images([img for img, _ in pairs])
    if images.shape[-1] % 4 or images.shape[-2] % 4:
        raise ShapeError(f"classifier images must be 4-divisible, got {images.shape}")
    rng = Rng(seed).spawn("space-classifier")
    order = rng.spawn("split").shuffled(len(pairs))
    n_hold = max(1, int(round(holdout_fraction * len(pairs))))
    if n_hold >= len(pairs):
        raise ConfigError("holdout leaves no training data")
    hold, tr = order[:n_hold], order[n_hold:]
    flat = 16 * (images.shape[-2] // 4) * (images.shape[-1] // 4)
    values = _classifier_init(rng.spawn("init"), len(classes), flat)
    m = {k: np.zeros_like(v) for k, v in values.items()}
    v = {k: np.zeros_like(vv) for k, vv in values.items()}
    for step in range(1, steps + 1):
        step_lr = lr if step < 0.7 * steps else lr / 5.0
        idx = tr[rng.spawn("batch", step).shuffled(len(tr))[: min(batch_size, len(tr))]]
        onehot = np.zeros((len(idx), len(classes)))
        onehot[np.arange(len(idx)), labels[idx]] = 1.0
        pv = _vars(values)
        logits = _classifier_tower(pv, ag.Var(images[idx]))
        logp = ag.log(ag.softmax_last(logits))
        loss = ag.neg(ag.mean_(ag.sum_(ag.mul(logp, ag.Var(onehot)), axis=1)))
        ag.backward(loss)
        values["cls.out.w"] = values["cls.out.w"] * (1.0 - step_lr * 1e-2)
        _adam_update(values, _grads(pv), m, v, step, step_lr)
    clf = SpaceClassifier(params=values, classes=tuple(classes), accuracy=0.0)
    probs = clf.predict_probs(images[hold].transpose(0, 2, 3, 1))
    clf.accuracy = float((probs.argmax(axis=1) == labels[hold]).mean())
    return clf


def inception_score_from_probs(probs: np.ndarray) -> float:
    """exp of the mean KL between per-image class distributions and their
    marginal; 1 means no class signal, k means confident and balanced."""
    probs = np.asarray(probs, dtype=np.float64)
    if probs.ndim != 2 or probs.shape[1] < 2:
        raise ShapeError(f"probs: want (n, k>=2), got {probs.shape}")
    require_finite("probs", probs)
    if probs.min() < -1e-12:
        raise DomainError("probs: negative entries")
    if np.abs(probs.sum(axis=1) - 1.0).max() > 1e-6:
        raise DomainError("probs: rows must sum to 1 within 1e-6")
    if probs.shape[0] == 1:
        warnings.warn("inception score over a single image is degenerate", RuntimeWarning)
    marginal = probs.mean(axis=0)
    safe_p = np.where(probs > 0, probs, 1.0)
    safe_q = np.where(marginal > 0, marginal, 1.0)
    kl = (probs * (np.log(safe_p) - np.log(safe_q)[None, :])).sum(axis=1)
    return float(np.exp(kl.mean()))


def inception_proxy(images, classifier: SpaceClassifier) -> float:
    if classifier.accuracy < 0.9:
        warnings.warn(
            f"space classifier held-out accuracy {classifier.accuracy:.3f} < 0.9; "
            "inception score unreliable",
            RuntimeWarning,
        )
    return inception_score_from_probs(classifier.predict_probs(images))


# ---------------------------------------------------------------------------
# similarity and retrieval


def similarity_score(images, prompts, encoder: DualEncoder) -> float:
    """Mean cosine between paired image and prompt embeddings."""
    prompts = list(prompts)
    za = encoder.embed_images(images)
    if za.shape[0] != len(prompts):
        raise ShapeError(f"similarity_score: {za.shape[0]} images vs {len(prompts)} prompts")
    zb = encoder.embed_texts(prompts)
    za, zb = _unit_rows(za), _unit_rows(zb)
    return float((za * zb).sum(axis=1).mean())


@dataclass(frozen=True)
class RetrievalTable:
    """Recall@k percentages for both retrieval directions."""

    ks: tuple
    image_to_text: dict
    text_to_image: dict

    def __post_init__(self):
        for direction in (self.image_to_text, self.text_to_image):
            prev = 0.0
            for k in self.ks:
                val = direction[k]
                if not 0.0 <= val <= 100.0 or val < prev - 1e-12:
                    raise DomainError(f"recall@{k}={val} breaks monotonicity bounds")
                prev = val


def _recall_direction(sims: np.ndarray, ks) -> dict:
    n = sims.shape[0]
    diag = np.diag(sims)[:, None]
    idx = np.arange(n)
    # rank of the true match: strictly better scores, plus equal scores at
    # lower index (ties broken toward the lower index)
    better = sims > diag
    tied_lower = (sims == diag) & (idx[None, :] < idx[:, None])
    ranks = (better | tied_lower).sum(axis=1)
    return {int(k): float(100.0 * (ranks < k).mean()) for k in ks}


def retrieval_recall(image_embs, text_embs, ks=(1, 5, 10)) -> RetrievalTable:
    """Recall@k with row i of each set as the true match of row i of the other."""
    a = np.asarray(image_embs, dtype=np.float64)
    b = np.asarray(text_embs, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 2:
        raise ShapeError(f"retrieval_recall: want matching (n, d), got {a.shape} vs {b.shape}")
    ks = tuple(int(k) for k in ks)
    if not ks or any(k < 1 for k in ks) or list(ks) != sorted(set(ks)):
        raise ConfigError(f"ks must be sorted positive uniques, got {ks}")
    if a.shape[0] <= max(ks):
        raise ConfigError(f"need more than max(ks)={max(ks)} rows, got {a.shape[0]}")
    sims = _unit_rows(a) @ _unit_rows(b).T
    return RetrievalTable(
        ks=ks,
        image_to_text=_recall_direction(sims, ks),
        text_to_image=_recall_direction(sims.T, ks),
    )


# ---------------------------------------------------------------------------
# report assembly


def evaluate_corpora(
    gen_images,
    gen_prompts,
    ref_images,
    ref_prompts,
    encoder: DualEncoder,
    classifier: SpaceClassifier,
    ks=(1, 5, 10),
) -> dict:
    """Full metric report comparing a generated corpus against a reference."""
    gen_prompts, ref_prompts = list(gen_prompts), list(ref_prompts)
    gen_feats = encoder.embed_images(gen_images)
    ref_feats = encoder.embed_images(ref_images)
    report = {
        "n_generated": int(gen_feats.shape[0]),
        "n_reference": int(ref_feats.shape[0]),
        "frechet_distance": frechet_distance(feature_stats(gen_feats), feature_stats(ref_feats)),
        "inception_proxy": {
            "score": inception_proxy(gen_images, classifier),
            "classifier_accuracy": classifier.accuracy,
            "reliable": bool(classifier.accuracy >= 0.9),
        },
        "similarity_score": similarity_score(gen_images, gen_prompts, encoder),
    }
    usable_ks = tuple(k for k in ks if k < gen_feats.shape[0])
    if usable_ks and gen_feats.shape[0] == len(gen_prompts):
        table = retrieval_recall(gen_feats, encoder.embed_texts(gen_prompts), usable_ks)
        report["retrieval"] = {
            "ks": list(table.ks),
            "image_to_text": {str(k): table.image_to_text[k] for k in table.ks},
            "text_to_image": {str(k): table.text_to_image[k] for k in table.ks},
        }
    return report


def render_table(headers, rows) -> str:
    """Aligned-column text table: headers, rule, rows."""
    cells = [[str(h) for h in headers]] + [[str(c) for c in row] for row in rows]
    widths = [max(len(row[i]) for row in cells) for i in range(len(headers))]
    lines = []
    for r, row in enumerate(cells):
        lines.append("  ".join(col.ljust(w) for col, w in zip(row, widths)).rstrip())
        if r == 0:
            lines.append("  ".join("-" * w for w in widths))
    return "\n".join(lines)


def format_report(report: dict) -> str:
    """Human-readable rendering of an evaluate_corpora report."""
    ip = report["inception_proxy"]
    rows = [
        ("samples (generated/reference)", f"{report['n_generated']}/{report['n_reference']}"),
        ("frechet_distance", f"{report['frechet_distance']:.6f}"),
        ("inception_proxy", f"{ip['score']:.6f}" + ("" if ip["reliable"] else " (unreliable)")),
        ("classifier_accuracy", f"{ip['classifier_accuracy']:.3f}"),
        ("similarity_score", f"{report['similarity_score']:.6f}"),
    ]
    parts = [render_table(("metric", "value"), rows)]
    if "retrieval" in report:
        ret = report["retrieval"]
        headers = ("direction",) + tuple(f"R@{k}" for k in ret["ks"])
        parts.append("")
        parts.append(
            render_table(
                headers,
                [
                    ("image->text",) + tuple(f"{ret['image_to_text'][str(k)]:.1f}" for k in ret["ks"]),
                    ("text->image",) + tuple(f"{ret['text_to_image'][str(k)]:.1f}" for k in ret["ks"]),
                ],
            )
        )
    return "\n".join(parts) + "\n"
