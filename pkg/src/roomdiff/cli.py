"""Batch operator surface wiring all modules together.

Subcommands: gen-data (procedural corpus), train, sample, eval, gradcheck,
elbo.  Every run writes its outputs plus a reproducibility manifest
(`run.json`: resolved config, config hash, input and output content hashes)
under a run directory, with no timestamps, so identical invocations produce
byte-identical trees.

Exit codes: 0 success, 2 invalid configuration or arguments, 3 runtime
failure.  Errors go to stderr with module-qualified messages.
"""
from __future__ import annotations

import argparse
import copy
import hashlib
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import designhelper_mini as data_mod
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .control_denoiser import (
    ConditioningBundle,
    DenoiserConfig,
    DenoiserParams,
    desk_config,
    forward_vars,
    init_params,
    refresh_reference,
    tiny_config,
    wrap_params,
)
from . import _autograd as ag
from .diffusion_process import build_schedule, elbo
from .errors import ConfigError, FormatError, RoomdiffError
from .evaluator import evaluate_corpora, format_report, train_dual_encoder, train_space_classifier
from .latent_codec import Codec, read_ppm
from .prompt_encoder import (
    PatchScorer,
    Vocabulary,
    make_embedding_table,
    tokenize,
    tokenize_and_embed,
    train_patch_scorer,
    weight_prompt,
)
from .sampler import SampleRequest, ancestral_sample, write_samples
from .tensor_core import Rng
from .trainer import ConditioningBuilder, TrainConfig, gradient_check, train, write_curve

DEFAULTS = {
    "seed": 0,
    # betas are 1/T-scaled so the chain ends at abar ~ 0 regardless of T;
    # the canonical (1e-4, 0.02) endpoints assume a thousand-step chain
    "schedule": {"T": 50, "beta_start": 2e-3, "beta_end": 0.4},
    "model": {"preset": "desk"},
    "codec": {"patch_size": 4, "seed": 0},
    "data": {
        "count": 256,
        "split": "train",
        "size": 32,
        "rough_fraction": 0.25,
        "constraints": None,
    },
    "train": {
        "steps": 200,
        "lr": 2e-3,
        "batch_size": 8,
        "weight_decay": 1e-4,
        "grad_clip": 1.0,
        "checkpoint_every": 0,
        "reference_fraction": 0.5,
        "scorer_epochs": 200,
    },
    "sample": {"count": 4, "prompt": "a modern living room with a sofa of width 3 and height 1"},
    "eval": {
        "ks": [1, 5, 10],
        "net_seed": 123,
        "encoder_corpus": 320,
        "encoder_steps": 1500,
        "classifier_corpus": 3000,
        "classifier_steps": 2500,
    },
    "gradcheck": {"subset": 200, "eps": 1e-5},
    "elbo": {"T": 3, "beta_start": 0.90, "beta_end": 0.99, "mc_samples": 48, "n_data": 64},
}

# free-form subtrees exempt from key/type validation
_OPEN_PATHS = {"data.constraints"}


# ---------------------------------------------------------------------------
# configuration


class RunConfig:
    """Merged, validated view of all settings plus their provenance."""

    def __init__(self, data: dict, source=None, overrides=()):
        self.data = data
        self.source = source
        self.overrides = tuple(overrides)

    def __getitem__(self, key):
        return self.data[key]

    def canonical(self) -> bytes:
        return json.dumps(self.data, sort_keys=True, separators=(",", ":")).encode("utf-8")

    def config_hash(self) -> str:
        return hashlib.blake2b(self.canonical(), digest_size=16).hexdigest()


def _merge_into(base: dict, extra: dict, path: str = ""):
    for key, value in extra.items():
        here = f"{path}.{key}" if path else key
        if key not in base:
            raise ConfigError(f"unknown config key: {here}")
        current = base[key]
        if here in _OPEN_PATHS:
            base[key] = value
        elif isinstance(current, dict) and isinstance(value, dict):
            _merge_into(current, value, here)
        elif isinstance(current, dict) or isinstance(value, dict):
            raise ConfigError(f"config key {here}: expected a {type(current).__name__}")
        else:
            base[key] = _coerce(here, current, value)


def _coerce(path: str, current, value):
    if current is None or value is None:
        return value
    if isinstance(current, bool) or isinstance(value, bool):
        if isinstance(current, bool) and isinstance(value, bool):
            return value
        raise ConfigError(f"config key {path}: expected a bool, got {value!r}")
    if isinstance(current, float) and isinstance(value, int):
        return float(value)
    if isinstance(current, int) and isinstance(value, float) and value.is_integer():
        return int(value)
    if isinstance(current, list) and isinstance(value, list):
        return value
    if type(current) is not type(value):
        raise ConfigError(
            f"config key {path}: expected {type(current).__name__}, got {type(value).__name__}"
        )
    return value


def _apply_set(data: dict, spec: str):
    if "=" not in spec:
        raise ConfigError(f"--set wants a.b=value, got {spec!r}")
    dotted, raw = spec.split("=", 1)
    keys = dotted.split(".")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    tree = value
    for key in reversed(keys):
        tree = {key: tree}
    _merge_into(data, tree)


def load_config(path=None, overrides=(), flag_sets=()):
    """defaults <- config file <- --set overrides <- explicit flags."""
    data = copy.deepcopy(DEFAULTS)
    if path is not None:
        try:
            loaded = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path}: {exc}") from exc
        if not isinstance(loaded, dict):
            raise ConfigError(f"config file {path}: top level must be an object")
        _merge_into(data, loaded)
    for spec in overrides:
        _apply_set(data, spec)
    for dotted, value in flag_sets:
        if value is not None:
            tree = value
            for key in reversed(dotted.split(".")):
                tree = {key: tree}
            _merge_into(data, tree)
    return RunConfig(data, source=path, overrides=overrides)


def thread_count() -> int:
    raw = os.environ.get("DIFF_DESIGN_THREADS")
    if raw is None:
        return os.cpu_count() or 1
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"DIFF_DESIGN_THREADS must be an integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError(f"DIFF_DESIGN_THREADS must be >= 1, got {n}")
    return min(n, os.cpu_count() or n)


# ---------------------------------------------------------------------------
# manifests


def _hash_bytes(data: bytes) -> str:
    return hashlib.blake2b(data, digest_size=16).hexdigest()


def _hash_path(path: Path) -> dict:
    """Content hashes for a file or every file under a directory."""
    path = Path(path)
    if path.is_file():
        return {path.name: _hash_bytes(path.read_bytes())}
    hashes = {}
    for child in sorted(path.rglob("*")):
        if child.is_file():
            hashes[child.relative_to(path).as_posix()] = _hash_bytes(child.read_bytes())
    return hashes


def _write_run_manifest(outdir: Path, command: str, cfg: RunConfig, inputs: dict):
    outputs = {}
    for child in sorted(outdir.rglob("*")):
        if child.is_file() and child.name != "run.json":
            outputs[child.relative_to(outdir).as_posix()] = _hash_bytes(child.read_bytes())
    manifest = {
        "command": command,
        "config": cfg.data,
        "config_hash": cfg.config_hash(),
        "config_source": cfg.source,
        "overrides": list(cfg.overrides),
        "seed": cfg["seed"],
        "threads": thread_count(),
        "inputs": inputs,
        "outputs": outputs,
    }
    (outdir / "run.json").write_text(
        json.dumps(manifest, sort_keys=True, separators=(",", ":")) + "\n"
    )


def _outdir(args, default: str) -> Path:
    out = Path(args.out) if args.out else Path(default)
    out.mkdir(parents=True, exist_ok=True)
    return out


# ---------------------------------------------------------------------------
# shared model plumbing


def _model_config(cfg: RunConfig, codec: Codec, image_size: int) -> DenoiserConfig:
    preset = cfg["model"]["preset"]
    grid = image_size // codec.patch_size
    if preset == "desk":
        return desk_config(in_channels=codec.channels, grid=grid)
    if preset == "tiny":
        return tiny_config()
    raise ConfigError(f"unknown model preset {preset!r}")


def _scorer_corpus(prompts, vocab: Vocabulary):
    corpus = []
    for prompt in prompts:
        ids = [vocab.id_of(tok) for tok in tokenize(prompt)]
        corpus.append((prompt, [bool(vocab.design_term[i]) for i in ids]))
    return corpus


def _build_text_stack(prompts, cfg: RunConfig, d_text: int):
    vocab = Vocabulary.load()
    table = make_embedding_table(vocab, d_text=d_text, seed=cfg["seed"])
    scorer = PatchScorer.create(d_text, seed=cfg["seed"])
    scorer, _loss = train_patch_scorer(
        _scorer_corpus(prompts, vocab), scorer, vocab, table,
        epochs=cfg["train"]["scorer_epochs"],
    )
    return vocab, table, scorer


def _snapshot_model(mcfg: DenoiserConfig) -> dict:
    return {
        "in_channels": mcfg.in_channels,
        "grid": mcfg.grid,
        "base": mcfg.base,
        "mults": list(mcfg.mults),
        "attn_grids": list(mcfg.attn_grids),
        "d_k": mcfg.d_k,
        "d_text": mcfg.d_text,
        "groups": mcfg.groups,
    }


def _checkpoint_for(cfg, mcfg, params, codec, table, scorer, step) -> Checkpoint:
    refresh_reference(params)
    snapshot = copy.deepcopy(cfg.data)
    snapshot["model"] = dict(snapshot["model"], **_snapshot_model(mcfg))
    snapshot["resume_step"] = step
    tensors = {f"model.{name}": arr for name, arr in params.values.items()}
    tensors["codec.mixing"] = codec.mixing
    tensors["codec.offset"] = codec.offset
    tensors["codec.scale"] = codec.scale
    tensors["text.table"] = table
    tensors["text.scorer.w1"] = scorer.w1
    tensors["text.scorer.b1"] = scorer.b1
    tensors["text.scorer.w2"] = scorer.w2
    tensors["text.scorer.b2"] = scorer.b2
    return Checkpoint(
        config=snapshot,
        tensors=tensors,
        rng_state=Rng(cfg["seed"]).state(),
    )


def _stack_from_checkpoint(ckpt: Checkpoint):
    snap = ckpt.config
    model_fields = {k: v for k, v in snap["model"].items() if k != "preset"}
    model_fields["mults"] = tuple(model_fields["mults"])
    model_fields["attn_grids"] = tuple(model_fields["attn_grids"])
    mcfg = DenoiserConfig(**model_fields)
    params = DenoiserParams(
        mcfg,
        {name[len("model."):]: arr for name, arr in ckpt.tensors.items() if name.startswith("model.")},
    )
    codec = Codec(
        snap["codec"]["patch_size"],
        ckpt.tensors["codec.mixing"],
        ckpt.tensors["codec.offset"],
        ckpt.tensors["codec.scale"],
    )
    scorer = PatchScorer(
        w1=ckpt.tensors["text.scorer.w1"],
        b1=ckpt.tensors["text.scorer.b1"],
        w2=ckpt.tensors["text.scorer.w2"],
        b2=ckpt.tensors["text.scorer.b2"],
    )
    builder = ConditioningBuilder(codec, Vocabulary.load(), ckpt.tensors["text.table"], scorer)
    schedule = build_schedule(
        snap["schedule"]["T"], snap["schedule"]["beta_start"], snap["schedule"]["beta_end"]
    )
    return mcfg, params, codec, builder, schedule


# ---------------------------------------------------------------------------
# subcommands


def _cmd_gen_data(args, cfg: RunConfig) -> int:
    out = _outdir(args, "runs/gen-data")
    d = cfg["data"]
    if d["count"] < 1:
        raise ConfigError(f"data.count must be >= 1, got {d['count']}")
    if not 0.0 <= d["rough_fraction"] <= 1.0:
        raise ConfigError(f"data.rough_fraction must be in [0,1], got {d['rough_fraction']}")
    split, seed = d["split"], cfg["seed"]
    for index in range(d["count"]):
        spec, doc, img = data_mod.generate_record(
            seed, split, index, d["constraints"], d["rough_fraction"], d["size"]
        )
        data_mod.write_record(out, split, index, spec, doc, img)
    manifest_path = Path(out) / "manifest.json"
    corpus_manifest = json.loads(manifest_path.read_text()) if manifest_path.exists() else {
        "seed": seed, "size": d["size"], "splits": {}
    }
    corpus_manifest["splits"][split] = d["count"]
    data_mod.write_manifest(out, corpus_manifest)
    inputs = {"config": _hash_path(Path(cfg.source))} if cfg.source else {}
    _write_run_manifest(out, "gen-data", cfg, inputs)
    print(f"wrote {d['count']} records to {out}/{split}")
    return 0


def _load_corpus(root: Path):
    """(images01, prompts, specs) for every split of a corpus directory."""
    manifest = data_mod.read_manifest(root)
    images, prompts, specs = [], [], []
    for split in sorted(manifest["splits"]):
        for spec, doc, img in data_mod.read_split(root, split):
            images.append(img)
            prompts.append(doc.prompt)
            specs.append(spec)
    if not images:
        raise FormatError(f"corpus {root} has no records")
    return images, prompts, specs


def _cmd_train(args, cfg: RunConfig) -> int:
    out = _outdir(args, "runs/train")
    data_dir = Path(args.data)
    seed = cfg["seed"]
    tcfg = TrainConfig(
        lr=cfg["train"]["lr"],
        weight_decay=cfg["train"]["weight_decay"],
        batch_size=cfg["train"]["batch_size"],
        steps=cfg["train"]["steps"],
        seed=seed,
        grad_clip=cfg["train"]["grad_clip"],
    )
    schedule = build_schedule(
        cfg["schedule"]["T"], cfg["schedule"]["beta_start"], cfg["schedule"]["beta_end"]
    )
    images, prompts, specs = _load_corpus(data_dir)
    size = images[0].shape[0]
    codec = Codec.create(cfg["codec"]["patch_size"], seed=cfg["codec"]["seed"]).fit(images)
    mcfg = _model_config(cfg, codec, size)
    vocab, table, scorer = _build_text_stack(prompts, cfg, mcfg.d_text)
    builder = ConditioningBuilder(codec, vocab, table, scorer)
    params = init_params(mcfg, seed)

    ref_fraction = cfg["train"]["reference_fraction"]
    flag_rng = Rng(seed)
    dataset = []
    for index, (img, prompt, spec) in enumerate(zip(images, prompts, specs)):
        use_ref = float(flag_rng.spawn("ref-flag", index).uniform()) < ref_fraction
        dataset.append((img, prompt, img if use_ref else None, spec))

    def checkpoint_fn(step, step_params, _state):
        ck = _checkpoint_for(cfg, mcfg, step_params, codec, table, scorer, step)
        save_checkpoint(out / f"checkpoint-{step:06d}.ddmp", ck)

    params, curve = train(
        dataset, tcfg, params, schedule, builder,
        checkpoint_fn=checkpoint_fn if cfg["train"]["checkpoint_every"] else None,
        checkpoint_every=cfg["train"]["checkpoint_every"],
    )
    save_checkpoint(
        out / "checkpoint.ddmp",
        _checkpoint_for(cfg, mcfg, params, codec, table, scorer, tcfg.steps),
    )
    write_curve(out / "curve.csv", curve)
    _write_run_manifest(out, "train", cfg, {"data": _hash_path(data_dir)})
    if curve:
        first = float(np.mean([loss for _, loss in curve[:50]]))
        last = float(np.mean([loss for _, loss in curve[-50:]]))
        print(f"trained {tcfg.steps} steps: loss {first:.4f} -> {last:.4f}")
    else:
        print("trained 0 steps: checkpoint equals initialization")
    return 0


def _cmd_sample(args, cfg: RunConfig) -> int:
    out = _outdir(args, "runs/sample")
    ckpt_path = Path(args.checkpoint)
    ckpt = load_checkpoint(ckpt_path)
    _mcfg, params, codec, builder, schedule = _stack_from_checkpoint(ckpt)
    ref_image = read_ppm(args.reference) if args.reference else None
    request = SampleRequest(
        prompt=cfg["sample"]["prompt"],
        seed=cfg["seed"],
        count=cfg["sample"]["count"],
        ref_image=ref_image,
    )
    images, diagnostics = ancestral_sample(
        request, params, schedule, codec, builder, return_diagnostics=True
    )
    write_samples(out, request, images, diagnostics)
    inputs = {"checkpoint": _hash_path(ckpt_path)}
    if args.reference:
        inputs["reference"] = _hash_path(Path(args.reference))
    _write_run_manifest(out, "sample", cfg, inputs)
    print(f"wrote {len(images)} samples to {out}")
    return 0


def _load_eval_dir(root: Path):
    """images + prompts from either a corpus directory or a sample run."""
    root = Path(root)
    sidecar = root / "samples.json"
    if sidecar.exists():
        meta = json.loads(sidecar.read_text())
        images, prompts = [], []
        for i in range(meta["count"]):
            images.append(read_ppm(root / f"{i:06d}.ppm"))
            prompts.append(meta["prompt"])
        return images, prompts
    images, prompts, _specs = _load_corpus(root)
    return images, prompts


def _metric_networks(cfg: RunConfig, size: int):
    e = cfg["eval"]
    net_seed = e["net_seed"]

    def corpus(count, tag):
        images, prompts, spaces = [], [], []
        for i in range(count):
            spec, doc, img = data_mod.generate_record(net_seed, tag, i, None, 0.0, size)
            images.append(img)
            prompts.append(doc.prompt)
            spaces.append(spec.space_type)
        return images, prompts, spaces

    enc_images, enc_prompts, _ = corpus(e["encoder_corpus"], "encoder")
    encoder = train_dual_encoder(
        list(zip(enc_images, enc_prompts)), steps=e["encoder_steps"], seed=net_seed
    )
    cls_images, _, cls_spaces = corpus(e["classifier_corpus"], "classifier")
    classifier = train_space_classifier(
        list(zip(cls_images, cls_spaces)), steps=e["classifier_steps"], seed=net_seed
    )
    return encoder, classifier


def _cmd_eval(args, cfg: RunConfig) -> int:
    out = _outdir(args, "runs/eval")
    gen_dir, ref_dir = Path(args.generated), Path(args.reference)
    gen_images, gen_prompts = _load_eval_dir(gen_dir)
    ref_images, ref_prompts = _load_eval_dir(ref_dir)
    encoder, classifier = _metric_networks(cfg, np.asarray(gen_images[0]).shape[0])
    ks = tuple(k for k in cfg["eval"]["ks"] if k < len(gen_images))
    report = evaluate_corpora(
        np.stack(gen_images), gen_prompts, np.stack(ref_images), ref_prompts,
        encoder, classifier, ks=ks,
    )
    (out / "report.json").write_text(
        json.dumps(report, sort_keys=True, separators=(",", ":")) + "\n"
    )
    text = format_report(report)
    (out / "report.txt").write_text(text)
    _write_run_manifest(
        out, "eval", cfg,
        {"generated": _hash_path(gen_dir), "reference": _hash_path(ref_dir)},
    )
    print(text, end="")
    return 0


def build_gradcheck_problem(preset: str, seed: int = 0):
    """(params, loss_fn) with both control paths active for a preset model."""
    if preset == "tiny":
        mcfg = tiny_config()
    elif preset == "desk":
        mcfg = desk_config()
    else:
        raise ConfigError(f"unknown gradcheck preset {preset!r}")
    params = init_params(mcfg, seed)
    stream = Rng(seed).spawn("gradcheck-data")
    # nudge away from the symmetric zero-init point so every path matters
    for name in params.trainable_names():
        params.values[name] = params.values[name] + 0.05 * stream.spawn("nudge", name).normal(
            params.values[name].shape
        )
    refresh_reference(params)
    vocab = Vocabulary.load()
    table = make_embedding_table(vocab, d_text=mcfg.d_text, seed=seed)
    scorer = PatchScorer.create(mcfg.d_text, seed=seed)
    shape = (mcfg.in_channels, mcfg.grid, mcfg.grid)
    z_t = stream.spawn("zt").normal(shape)
    target = stream.spawn("target").normal(shape)
    c_ref = stream.spawn("ref").normal(shape)
    prompt = "a nordic study with a desk of width 2 and height 1"
    feats = weight_prompt(tokenize_and_embed(prompt, vocab, table), scorer)
    design_rows = stream.spawn("design").normal((2, mcfg.d_text))
    cond = ConditioningBundle(c_text=feats, c_ref=c_ref, c_design=design_rows)
    t = 3

    def loss_fn(values):
        work = DenoiserParams(mcfg, values)
        pvars = wrap_params(work, trainable=True)
        eps_hat = forward_vars(pvars, ag.Var(z_t), t, cond, mcfg)
        diff = ag.sub(eps_hat, ag.Var(target))
        loss = ag.sum_(ag.mul(diff, diff))
        ag.backward(loss)
        grads = {}
        for name in work.trainable_names():
            g = pvars[name].grad
            grads[name] = np.zeros_like(values[name]) if g is None else g
        return float(loss.data), grads

    return params, loss_fn


def _cmd_gradcheck(args, cfg: RunConfig) -> int:
    out = _outdir(args, "runs/gradcheck")
    params, loss_fn = build_gradcheck_problem(args.preset, cfg["seed"])
    report = gradient_check(
        params, loss_fn,
        subset_size=cfg["gradcheck"]["subset"],
        eps=cfg["gradcheck"]["eps"],
        seed=cfg["seed"],
    )
    report["preset"] = args.preset
    report["passed"] = bool(report["max_rel_err"] < 1e-4)
    (out / "gradcheck.json").write_text(
        json.dumps(report, sort_keys=True, separators=(",", ":")) + "\n"
    )
    _write_run_manifest(out, "gradcheck", cfg, {})
    print(f"max relative error {report['max_rel_err']:.3e} "
          f"over {report['checked']} coordinates (preset {args.preset})")
    return 0 if report["passed"] else 3


def _cmd_elbo(args, cfg: RunConfig) -> int:
    out = _outdir(args, "runs/elbo")
    e = cfg["elbo"]
    schedule = build_schedule(e["T"], e["beta_start"], e["beta_end"])

    def denoiser(z, t):
        return np.sqrt(1.0 - schedule.abar(t)) * z

    def closed_form_ll(z0: float) -> float:
        var = 1.0
        for t in range(schedule.T, 0, -1):
            if t >= 2:
                step_var = schedule.bt(t) * (1 - schedule.abar(t - 1)) / (1 - schedule.abar(t))
            else:
                step_var = schedule.bt(1)
            var = schedule.at(t) * var + step_var
        return float(-0.5 * np.log(2 * np.pi * var) - z0**2 / (2 * var))

    rng = Rng(cfg["seed"])
    gaps, totals = [], []
    for i in range(e["n_data"]):
        z0 = rng.spawn("z0", i).normal((1,))
        report = elbo(z0, denoiser, schedule, rng.spawn("elbo", i), mc_samples=e["mc_samples"])
        gaps.append(closed_form_ll(float(z0[0])) - report.total)
        totals.append(report.total)
    gaps = np.asarray(gaps)
    sem = float(gaps.std(ddof=1) / np.sqrt(len(gaps)))
    payload = {
        "T": e["T"],
        "n_data": e["n_data"],
        "mc_samples": e["mc_samples"],
        "mean_elbo": float(np.mean(totals)),
        "mean_gap": float(gaps.mean()),
        "gap_sem": sem,
        "elbo_below_ll": bool(gaps.mean() > -3 * sem),
    }
    (out / "elbo.json").write_text(
        json.dumps(payload, sort_keys=True, separators=(",", ":")) + "\n"
    )
    _write_run_manifest(out, "elbo", cfg, {})
    print(
        f"ELBO {payload['mean_elbo']:.4f} nats, gap to closed-form likelihood "
        f"{payload['mean_gap']:.4f} +- {sem:.4f}"
    )
    return 0


# ---------------------------------------------------------------------------
# argument parsing and dispatch


def _make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="roomdiff", description="controllable latent diffusion over room layouts"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", default=None, help="JSON config file")
        sp.add_argument("--set", dest="overrides", action="append", default=[],
                        metavar="a.b=v", help="override one config key")
        sp.add_argument("--out", default=None, help="run directory")
        sp.add_argument("--seed", type=int, default=None)

    p = sub.add_parser("gen-data", help="write a procedural layout corpus")
    common(p)
    p.add_argument("--count", type=int, default=None)
    p.add_argument("--split", default=None)

    p = sub.add_parser("train", help="train the denoiser on a corpus")
    common(p)
    p.add_argument("--data", required=True, help="corpus directory from gen-data")
    p.add_argument("--steps", type=int, default=None)

    p = sub.add_parser("sample", help="ancestral sampling from a checkpoint")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--prompt", default=None)
    p.add_argument("--count", type=int, default=None)
    p.add_argument("--reference", default=None, help="PPM appearance reference")

    p = sub.add_parser("eval", help="metric report between two image sets")
    common(p)
    p.add_argument("--generated", required=True)
    p.add_argument("--reference", required=True)

    p = sub.add_parser("gradcheck", help="finite-difference audit of the gradient")
    common(p)
    p.add_argument("--preset", choices=("tiny", "desk"), default="tiny")

    p = sub.add_parser("elbo", help="toy-model ELBO vs closed-form likelihood")
    common(p)
    return parser


def _flag_sets(args) -> list:
    pairs = [("seed", getattr(args, "seed", None))]
    if args.command == "gen-data":
        pairs.append(("data.count", getattr(args, "count", None)))
        pairs.append(("data.split", getattr(args, "split", None)))
    elif args.command == "train":
        pairs.append(("train.steps", getattr(args, "steps", None)))
    elif args.command == "sample":
        pairs.append(("sample.count", getattr(args, "count", None)))
        pairs.append(("sample.prompt", getattr(args, "prompt", None)))
    return pairs


_HANDLERS = {
    "gen-data": _cmd_gen_data,
    "train": _cmd_train,
    "sample": _cmd_sample,
    "eval": _cmd_eval,
    "gradcheck": _cmd_gradcheck,
    "elbo": _cmd_elbo,
}


def _qualified(exc: Exception) -> str:
    return f"{type(exc).__module__}.{type(exc).__name__}: {exc}"


def run(argv=None) -> int:
    parser = _make_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        thread_count()  # validate the env var before any work
        cfg = load_config(args.config, tuple(args.overrides), _flag_sets(args))
        return _HANDLERS[args.command](args, cfg)
    except (ConfigError, FormatError, FileNotFoundError) as exc:
        print(_qualified(exc), file=sys.stderr)
        return 2
    except (RoomdiffError, OSError) as exc:
        print(_qualified(exc), file=sys.stderr)
        return 3


def main():
    raise SystemExit(run())
