"""Command line surface: synth, train, eval, decode, gradcheck.

Exit codes are uniform across commands: 0 success, 1 a numeric check
failed, 2 bad usage or unreadable input, 3 training divergence.

Config files are flat `key = value` lines (# comments, blank lines ok).
Every command validates keys against its own allowed set and rejects
anything else by name; command-line flags override file values.
"""

from __future__ import annotations

import sys
from pathlib import Path

import click
import numpy as np

from .caption_grammar import END_TOKEN, START_TOKEN, build_vocab, zero_shot_check
from .glyph_synth import (
    CoverageInfeasible,
    DatasetManifest,
    GlyphImage,
    ManifestError,
    StructureOp,
    read_pgm,
    synth_dataset,
    write_pgm,
)
from .ran_model import (
    EncoderConfig,
    ModelConfig,
    beam_search,
    encode_image,
    forward_teacher_forced,
    init_params,
    micro_model_config,
)
from .tensor_core import grad_check, no_grad
from .train_eval import (
    CorruptCheckpoint,
    DivergenceError,
    EmptyManifest,
    IncompatibleCheckpoint,
    TrainConfig,
    ZeroShotViolation,
    evaluate,
    load_checkpoint,
    save_checkpoint,
    train,
)

_TRAIN_KEYS = {
    "preset": str,
    "m": int,
    "n": int,
    "M": int,
    "coverage_kernel": int,
    "image_size": int,
    "batch_size": int,
    "epochs": int,
    "patience": int,
    "seed": int,
    "precision": str,
    "rho": float,
    "eps": float,
    "clip_norm": float,
    "beam": int,
    "max_len": int,
}
_SYNTH_KEYS = {
    "radicals": int,
    "structures": str,
    "compositions": int,
    "split": str,
    "seed": int,
    "size": int,
}


def _die(code: int, message: str):
    click.echo(f"error: {message}", err=True)
    sys.exit(code)


def _read_config(path, allowed: dict):
    """Parse a flat key = value file against an allowed-key schema."""
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        _die(2, f"cannot read config {path}: {exc}")
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        key, sep, raw = stripped.partition("=")
        if not sep:
            _die(2, f"{path}:{lineno}: expected `key = value`")
        key = key.strip()
        raw = raw.strip()
        if key not in allowed:
            _die(2, f"{path}:{lineno}: unknown config key {key!r}")
        try:
            values[key] = allowed[key](raw)
        except ValueError:
            _die(2, f"{path}:{lineno}: bad value {raw!r} for {key}")
    return values


def _merged(file_values: dict, flag_values: dict, defaults: dict) -> dict:
    out = dict(defaults)
    out.update(file_values)
    out.update({k: v for k, v in flag_values.items() if v is not None})
    return out


def _parse_structures(text: str):
    ops = []
    for code in text.split(","):
        code = code.strip()
        if not code:
            continue
        try:
            ops.append(StructureOp(code))
        except ValueError:
            _die(2, f"unknown structure code {code!r}")
    if not ops:
        _die(2, "no structure codes given")
    return ops


def _parse_split(text: str):
    parts = [p.strip() for p in text.split(",")]
    if len(parts) != 3:
        _die(2, f"split needs three comma-separated fractions, got {text!r}")
    try:
        return tuple(float(p) for p in parts)
    except ValueError:
        _die(2, f"split fractions must be numbers, got {text!r}")


def _load_manifest(data_dir, split: str) -> DatasetManifest:
    path = Path(data_dir) / f"{split}.tsv"
    try:
        return DatasetManifest.load(path)
    except OSError as exc:
        _die(2, f"cannot read manifest {path}: {exc}")
    except ManifestError as exc:
        _die(2, str(exc))


@click.group()
def main():
    """Radical-composition glyph recognition toolkit."""


@main.command("synth")
@click.option("--radicals", type=int, default=None, help="Radical inventory size [20].")
@click.option("--structures", default=None,
              help="Comma-separated structure codes [all ten].")
@click.option("--compositions", type=int, default=None,
              help="Distinct compositions to draw [200].")
@click.option("--split", default=None,
              help="train,valid,test fractions [0.7,0.1,0.2].")
@click.option("--seed", type=int, default=None, help="Dataset seed [1].")
@click.option("--size", type=int, default=None, help="Image side in pixels [64].")
@click.option("--config", "config_file", type=click.Path(), default=None,
              help="key = value file with dataset parameters.")
@click.option("--out", "out_dir", required=True, type=click.Path(),
              help="Output directory for images and manifests.")
def cmd_synth(radicals, structures, compositions, split, seed, size,
              config_file, out_dir):
    """Generate a synthetic composite-glyph dataset."""
    file_values = _read_config(config_file, _SYNTH_KEYS) if config_file else {}
    flags = {"radicals": radicals, "structures": structures,
             "compositions": compositions, "split": split, "seed": seed,
             "size": size}
    defaults = {"radicals": 20, "structures": ",".join(op.code for op in StructureOp),
                "compositions": 200, "split": "0.7,0.1,0.2", "seed": 1,
                "size": 64}
    v = _merged(file_values, flags, defaults)
    ops = _parse_structures(v["structures"])
    fractions = _parse_split(v["split"])
    try:
        train_m, valid_m, test_m = synth_dataset(
            radicals=v["radicals"],
            structures=ops,
            compositions=v["compositions"],
            split_fractions=fractions,
            seed=v["seed"],
            out_dir=out_dir,
            out_size=v["size"],
        )
    except (CoverageInfeasible, ValueError) as exc:
        _die(2, str(exc))
    click.echo(f"train={len(train_m)}")
    click.echo(f"valid={len(valid_m)}")
    click.echo(f"test={len(test_m)}")
    held_out = valid_m.captions() + test_m.captions()
    check = zero_shot_check(train_m.captions(), held_out)
    click.echo(f"zero_shot={'ok' if check.ok else 'violated'}")


_PRESET_DIMS = {"micro": 8, "vgg14_s": 256, "vgg14": 256}


def _encoder_for(preset: str) -> EncoderConfig:
    if preset == "micro":
        return EncoderConfig(blocks=((1, 8),))
    if preset == "vgg14_s":
        return EncoderConfig.vgg14_s()
    if preset == "vgg14":
        return EncoderConfig.vgg14()
    _die(2, f"unknown preset {preset!r}")


@main.command("train")
@click.option("--data", "data_dir", required=True, type=click.Path(),
              help="Directory holding train.tsv/valid.tsv and images/.")
@click.option("--config", "config_file", type=click.Path(), default=None,
              help="key = value training recipe.")
@click.option("--out", "out_path", required=True, type=click.Path(),
              help="Checkpoint output path.")
@click.option("--log", "log_path", type=click.Path(), default=None,
              help="Training log path [<out>.log.tsv].")
@click.option("--preset", type=click.Choice(["vgg14_s", "vgg14", "micro"]),
              default=None, help="Encoder preset [vgg14_s].")
@click.option("--epochs", type=int, default=None)
@click.option("--batch-size", "batch_size", type=int, default=None)
@click.option("--patience", type=int, default=None)
@click.option("--seed", type=int, default=None)
@click.option("--precision", type=click.Choice(["float32", "float64"]),
              default=None)
@click.option("--beam", type=int, default=None)
@click.option("--max-len", "max_len", type=int, default=None)
@click.option("--image-size", "image_size", type=int, default=None)
def cmd_train(data_dir, config_file, out_path, log_path, preset, epochs,
              batch_size, patience, seed, precision, beam, max_len,
              image_size):
    """Fit a model on a synthesized dataset and write the best checkpoint."""
    file_values = _read_config(config_file, _TRAIN_KEYS) if config_file else {}
    flags = {"preset": preset, "epochs": epochs, "batch_size": batch_size,
             "patience": patience, "seed": seed, "precision": precision,
             "beam": beam, "max_len": max_len, "image_size": image_size}
    v = _merged(file_values, flags, {})
    preset_name = v.pop("preset", "vgg14_s")
    encoder = _encoder_for(preset_name)
    dim_default = _PRESET_DIMS[preset_name]
    model_dims = {
        "m": v.pop("m", dim_default),
        "n": v.pop("n", dim_default),
        "M": v.pop("M", dim_default),
        "coverage_kernel": v.pop("coverage_kernel", 5),
    }
    train_m = _load_manifest(data_dir, "train")
    valid_m = _load_manifest(data_dir, "valid")
    vocab = build_vocab(train_m.captions() + valid_m.captions())
    try:
        model_cfg = ModelConfig(encoder=encoder, vocab_size=vocab.size,
                                **model_dims)
        cfg = TrainConfig(model=model_cfg, **v)
    except ValueError as exc:
        _die(2, str(exc))
    log = Path(log_path) if log_path else Path(f"{out_path}.log.tsv")
    try:
        ckpt = train(train_m, valid_m, cfg, data_root=data_dir, log_path=log)
    except ZeroShotViolation as exc:
        _die(2, str(exc))
    except (ValueError, OSError) as exc:
        _die(2, str(exc))
    except DivergenceError as exc:
        if exc.checkpoint is not None:
            save_checkpoint(exc.checkpoint.params, exc.checkpoint.opt,
                            exc.checkpoint.config, exc.checkpoint.vocab,
                            out_path)
            click.echo(f"diverged; last good checkpoint kept at {out_path}",
                       err=True)
        _die(3, str(exc))
    save_checkpoint(ckpt.params, ckpt.opt, ckpt.config, ckpt.vocab, out_path)
    best = max(float(line.split("\t")[2])
               for line in log.read_text().splitlines()[1:])
    click.echo(f"checkpoint={out_path}")
    click.echo(f"valid_accuracy={best!r}")


@main.command("eval")
@click.option("--data", "data_dir", required=True, type=click.Path())
@click.option("--split", type=click.Choice(["train", "valid", "test"]),
              default="test", show_default=True)
@click.option("--ckpt", "ckpt_path", required=True, type=click.Path())
@click.option("--beam", type=int, default=10, show_default=True)
@click.option("--report", "report_path", type=click.Path(), default=None,
              help="Per-sample TSV report path.")
def cmd_eval(data_dir, split, ckpt_path, beam, report_path):
    """Exact-match accuracy of a checkpoint on one dataset split."""
    manifest = _load_manifest(data_dir, split)
    try:
        ckpt = load_checkpoint(ckpt_path)
    except (IncompatibleCheckpoint, CorruptCheckpoint, OSError) as exc:
        _die(2, str(exc))
    try:
        report = evaluate(manifest, ckpt, beam=beam, data_root=data_dir,
                          report_path=report_path)
    except EmptyManifest as exc:
        _die(2, str(exc))
    click.echo(f"accuracy={report.accuracy!r}")


def _safe_token(token: str) -> str:
    special = {"{": "brace_open", "}": "brace_close",
               START_TOKEN: "sos", END_TOKEN: "eos"}
    if token in special:
        return special[token]
    return "".join(ch if ch.isalnum() or ch in "_-" else f"x{ord(ch):02x}"
                   for ch in token)


def _upsample_nearest(arr: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    rows = (np.arange(out_h) * arr.shape[0]) // out_h
    cols = (np.arange(out_w) * arr.shape[1]) // out_w
    return arr[np.ix_(rows, cols)]


@main.command("decode")
@click.option("--image", "image_path", required=True, type=click.Path())
@click.option("--ckpt", "ckpt_path", required=True, type=click.Path())
@click.option("--beam", type=int, default=10, show_default=True)
@click.option("--attn-dir", "attn_dir", type=click.Path(), default=None,
              help="Write one attention heatmap PGM per decode step.")
def cmd_decode(image_path, ckpt_path, beam, attn_dir):
    """Decode one PGM image to a caption, optionally dumping attention."""
    try:
        img = read_pgm(image_path)
    except (OSError, ValueError) as exc:
        _die(2, f"cannot read image {image_path}: {exc}")
    try:
        ckpt = load_checkpoint(ckpt_path)
    except (IncompatibleCheckpoint, CorruptCheckpoint, OSError) as exc:
        _die(2, str(exc))
    cfg = ckpt.config
    with no_grad():
        grid = encode_image(img, cfg.model.encoder, ckpt.params)
    result = beam_search(grid, ckpt.params, cfg.model, ckpt.vocab,
                         beam=beam, max_len=cfg.max_len)
    click.echo(f"caption={result.caption}")
    click.echo(f"log_prob={result.log_prob!r}")
    if attn_dir is None:
        return
    out = Path(attn_dir)
    out.mkdir(parents=True, exist_ok=True)
    for step, (token_index, alpha) in enumerate(
            zip(result.tokens, result.alphas), start=1):
        token = _safe_token(ckpt.vocab.token(token_index))
        heat = _upsample_nearest(alpha, img.height, img.width)
        peak = heat.max()
        if peak > 0:
            heat = heat / peak
        write_pgm(GlyphImage(heat), out / f"step_{step}_{token}.pgm")
    click.echo(f"heatmaps={len(result.tokens)}")


@main.command("gradcheck")
@click.option("--preset", type=click.Choice(["micro"]), default="micro",
              show_default=True, help="Model size to check.")
def cmd_gradcheck(preset):
    """Finite-difference check of the whole backward pass at 64 bits."""
    cfg = micro_model_config()
    params = init_params(cfg, seed=0, dtype=np.float64)
    rng = np.random.default_rng(0)
    pixels = rng.uniform(size=(8, 8))
    target = [0, 2, 4, 3, 1]

    def build():
        loss, _ = forward_teacher_forced(pixels, target, cfg, params)
        return loss

    worst = grad_check(build, params)
    click.echo(f"preset={preset}")
    click.echo(f"max_relative_error={worst!r}")
    if not (worst < 1e-4):
        _die(1, f"gradient check failed: {worst!r} is not below 1e-4")


if __name__ == "__main__":
    main()
