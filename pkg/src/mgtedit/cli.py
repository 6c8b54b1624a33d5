"""Command-line entry point.

Every subcommand prints one canonical JSON summary line on stdout. Failures
print one JSON object ``{"code", "message", "path"}`` on stderr and exit
with status 2.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import math
import os
import sys
from dataclasses import asdict, dataclass, field

import numpy as np

from . import codec
from .codec import (TokenGrid, Vocab, canonical_json, dequantize, make_codebook, quantize, read_pgm,
                    read_ppm, tokenize_instruction, write_pgm, write_ppm, write_text)
from .consolidation import adaptive_filter, localization_score, map_sidecar, map_to_pgm, normalize_cross_attention
from .errors import MGTError, MissingFileError, ParseError, UsageError, ValidationError
from .leakage import eval_leakage
from .masking import DEFAULT_R_MIN, TrainingSample, train
from .sampler import FREEZE, RUNNING, SamplerConfig, edit
from .transformer import ModelConfig, forward, init_weights, load_weights, save_weights, weights_from_json, weights_to_json

EXIT_ERROR = 2


@dataclass
class Opt:
    """One flag: argparse arguments plus the default used when neither flag nor config sets it."""

    flags: tuple
    default: object = None
    kwargs: dict = field(default_factory=dict)
    is_input: bool = False


def _o(*flags, default=None, is_input=False, **kwargs):
    return Opt(flags, default, kwargs, is_input)


_SHARED = {
    "seed": _o("--seed", default=0, type=int, help="RNG seed"),
    "out_dir": _o("--out-dir", default=".", help="directory for output files"),
    "config": _o("--config", is_input=True, help="JSON run config; explicit flags win"),
}

_COMMANDS = {
    "make-codebook": dict(
        help="generate a random codebook",
        opts={
            "k": _o("--k", default=16, type=int, help="number of entries"),
            "patch": _o("--patch", default=4, type=int, help="patch side in pixels"),
            "style": _o("--style", default="solid", choices=["solid", "random"]),
        },
    ),
    "make-image": dict(
        help="random image built from codebook patches, optionally with a square region mask",
        opts={
            "codebook": _o("--codebook", is_input=True, required_=True),
            "grid_h": _o("--grid-h", default=8, type=int, help="height in tokens"),
            "grid_w": _o("--grid-w", default=8, type=int, help="width in tokens"),
            "region": _o("--region", help="token box r0,c0,r1,c1 (half-open); writes region.pgm"),
        },
    ),
    "tokenize": dict(
        help="quantize a PPM image into a token grid",
        opts={
            "image": _o("--image", is_input=True, required_=True),
            "codebook": _o("--codebook", is_input=True, required_=True),
        },
    ),
    "detokenize": dict(
        help="render a token grid back to a PPM image",
        opts={
            "grid": _o("--grid", is_input=True, required_=True),
            "codebook": _o("--codebook", is_input=True, required_=True),
        },
    ),
    "train-toy": dict(
        help="plain gradient descent on a manifest of (source, target, instruction) pairs",
        opts={
            "manifest": _o("--manifest", is_input=True, required_=True,
                           help="JSONL of {source, target?, instruction}; paths relative to the manifest"),
            "codebook": _o("--codebook", is_input=True, required_=True),
            "steps": _o("--steps", default=200, type=int),
            "lr": _o("--lr", default=0.1, type=float),
            "r_min": _o("--r-min", default=DEFAULT_R_MIN, type=float),
            "model": _o("--model", help="JSON object of model config overrides, e.g. '{\"d\":32}'"),
            "plot": _o("--plot", default=False, action="store_true"),
        },
    ),
    "edit": dict(
        help="edit a source image with an instruction",
        opts={
            "weights": _o("--weights", is_input=True, required_=True),
            "codebook": _o("--codebook", is_input=True, required_=True),
            "vocab": _o("--vocab", is_input=True, help="defaults to vocab.json beside the weights"),
            "source": _o("--source", is_input=True, required_=True),
            "instruction": _o("--instruction", required_=True),
            "keywords": _o("--keywords", help="comma-separated words used for localization"),
            "gamma": _o("--gamma", default=1.0, type=float),
            "lam": _o("--lambda", default=0.0, type=float, dest="lam"),
            "steps": _o("--steps", default=16, type=int),
            "temperature": _o("--temperature", default=1.0, type=float),
            "policy": _o("--freeze-sl", action="store_const", const=FREEZE, dest="policy", default=FREEZE,
                         help="freeze the localization map after step 1 (default)"),
            "_running": _o("--running-sl", action="store_const", const=RUNNING, dest="policy",
                           help="running mean of the localization map over steps"),
            "layers": _o("--layers", help="comma-separated layer labels, e.g. sm6,sm7"),
            "filter_passes": _o("--filter-passes", type=int, help="threshold the filtered map instead of raw"),
            "unlock_held": _o("--unlock-held", default=False, action="store_true",
                              help="re-mask held positions before every step"),
            "dump_attn": _o("--dump-attn", default=False, action="store_true",
                            help="also write attention maps under <out-dir>/attn"),
            "no_timing": _o("--no-timing", default=False, action="store_true",
                            help="omit wall-clock fields so diagnostics are byte-reproducible"),
            "plot": _o("--plot", default=False, action="store_true"),
        },
    ),
    "dump-attn": dict(
        help="write per-layer and consolidated attention maps from the first decoding step",
        opts={
            "weights": _o("--weights", is_input=True, required_=True),
            "codebook": _o("--codebook", is_input=True, required_=True),
            "vocab": _o("--vocab", is_input=True),
            "source": _o("--source", is_input=True, required_=True),
            "instruction": _o("--instruction", required_=True),
            "keywords": _o("--keywords"),
            "gamma": _o("--gamma", default=1.0, type=float),
            "layers": _o("--layers"),
            "filter_passes": _o("--filter-passes", default=1, type=int),
            "plot": _o("--plot", default=False, action="store_true"),
        },
    ),
    "eval-leakage": dict(
        help="outside-region pixel L1 and token-flip rate",
        opts={
            "source": _o("--source", is_input=True, required_=True),
            "edited": _o("--edited", is_input=True, required_=True),
            "mask": _o("--mask", is_input=True, required_=True, help="binary PGM, 255 marks the editable region"),
            "codebook": _o("--codebook", is_input=True, required_=True),
        },
    ),
    "validate": dict(
        help="check that files round-trip through their documented formats",
        opts={},
    ),
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="mgtedit", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    for name, entry in _COMMANDS.items():
        p = sub.add_parser(name, help=entry["help"], description=entry["help"])
        for key, opt in {**_SHARED, **entry["opts"]}.items():
            kw = {k: v for k, v in opt.kwargs.items() if k != "required_"}
            kw.setdefault("dest", key)
            # defaults are applied after merging with --config, so argparse sees None
            kw["default"] = None
            p.add_argument(*opt.flags, **kw)
        if name == "validate":
            p.add_argument("files", nargs="+", help="files to check")
    return parser


def _resolve(args: argparse.Namespace) -> argparse.Namespace:
    """Merge flags, the --config file and defaults, in that order of precedence."""
    entry = _COMMANDS[args.command]
    opts = {**_SHARED, **entry["opts"]}
    config = {}
    if args.config is not None:
        _require_file(args.config)
        try:
            config = json.loads(codec.read_text(args.config))
        except json.JSONDecodeError as exc:
            raise ParseError(f"run config: invalid JSON ({exc.msg})", offset=exc.pos, path=args.config) from None
        if not isinstance(config, dict):
            raise ValidationError("run config must be a JSON object", path=args.config)
        known = {opt.kwargs.get("dest", key) for key, opt in opts.items()} - {"config"}
        unknown = sorted(set(config) - known)
        if unknown:
            raise ValidationError(f"run config has unknown keys {unknown}", path=args.config)
    for key, opt in opts.items():
        dest = opt.kwargs.get("dest", key)
        if getattr(args, dest, None) is None:
            setattr(args, dest, config.get(dest, opt.default))
    for key, opt in opts.items():
        dest = opt.kwargs.get("dest", key)
        value = getattr(args, dest)
        if opt.kwargs.get("required_") and value is None:
            raise UsageError(f"{opt.flags[0]} is required")
        if opt.is_input and value is not None:
            _require_file(value)
    if args.command == "validate":
        for f in args.files:
            _require_file(f)
    return args


def _require_file(path) -> None:
    if not os.path.isfile(path):
        raise MissingFileError(f"input file not found: {path}", path=os.fspath(path))


def _out(args, name: str) -> str:
    os.makedirs(args.out_dir, exist_ok=True)
    return os.path.join(args.out_dir, name)


def _emit(obj) -> None:
    sys.stdout.write(canonical_json(obj))


def _words(value):
    if value is None:
        return None
    if isinstance(value, list):
        return [str(v) for v in value]
    return [w for w in str(value).split(",") if w]


# --------------------------------------------------------------------------
# Subcommands


def cmd_make_codebook(args) -> dict:
    cb = make_codebook(args.k, args.patch, np.random.default_rng(args.seed), args.style)
    path = _out(args, "codebook.json")
    write_text(path, codec.serialize_codebook(cb))
    return {"codebook": path, "k": cb.size, "patch": cb.patch}


def _parse_box(text, h, w):
    try:
        r0, c0, r1, c1 = (int(v) for v in str(text).split(","))
    except ValueError:
        raise UsageError(f"--region must be r0,c0,r1,c1, got {text!r}") from None
    if not (0 <= r0 < r1 <= h and 0 <= c0 < c1 <= w):
        raise UsageError(f"region {text} does not fit a {h}x{w} token grid")
    return r0, c0, r1, c1


def cmd_make_image(args) -> dict:
    cb = codec.load_codebook(args.codebook)
    rng = np.random.default_rng(args.seed)
    if args.grid_h < 1 or args.grid_w < 1:
        raise UsageError("grid size must be positive")
    grid = TokenGrid(args.grid_h, args.grid_w, rng.integers(0, cb.size, args.grid_h * args.grid_w), cb.size)
    path = _out(args, "image.ppm")
    write_ppm(dequantize(grid, cb), path)
    result = {"image": path, "h": grid.h, "w": grid.w}
    if args.region is not None:
        r0, c0, r1, c1 = _parse_box(args.region, grid.h, grid.w)
        mask = np.zeros((grid.h * cb.patch, grid.w * cb.patch), dtype=np.uint8)
        mask[r0 * cb.patch : r1 * cb.patch, c0 * cb.patch : c1 * cb.patch] = 255
        result["mask"] = _out(args, "region.pgm")
        write_pgm(mask, result["mask"])
    return result


def cmd_tokenize(args) -> dict:
    grid = quantize(read_ppm(args.image), codec.load_codebook(args.codebook))
    path = _out(args, "grid.json")
    write_text(path, codec.serialize_grid(grid))
    return {"grid": path, "h": grid.h, "w": grid.w}


def cmd_detokenize(args) -> dict:
    img = dequantize(codec.load_grid(args.grid), codec.load_codebook(args.codebook))
    path = _out(args, "image.ppm")
    write_ppm(img, path)
    return {"image": path, "width": img.width, "height": img.height}


def read_manifest(path) -> list[dict]:
    base = os.path.dirname(os.path.abspath(path))
    rows = []
    for lineno, line in enumerate(codec.read_text(path).splitlines(), 1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ParseError(f"manifest line {lineno}: invalid JSON ({exc.msg})", path=path) from None
        if not isinstance(obj, dict) or not {"source", "instruction"} <= set(obj) <= {"source", "target",
                                                                                     "instruction"}:
            raise ValidationError(f"manifest line {lineno}: need source, instruction and optional target", path=path)
        row = {"instruction": str(obj["instruction"])}
        for key in ("source", "target"):
            if obj.get(key) is not None:
                row[key] = os.path.join(base, obj[key])
                _require_file(row[key])
        rows.append(row)
    if not rows:
        raise UsageError("manifest has no training pairs", path=path)
    return rows


def write_loss_csv(log, path) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["step", "loss", "mask_rate", "masked"])
    for r in log:
        w.writerow([r.step, repr(r.loss), repr(r.rate), r.masked])
    write_text(path, buf.getvalue())


def _model_config(overrides, **fixed) -> ModelConfig:
    base = asdict(ModelConfig())
    if overrides is not None:
        obj = json.loads(overrides) if isinstance(overrides, str) else overrides
        if not isinstance(obj, dict) or set(obj) - set(base):
            raise UsageError(f"--model must be a JSON object with keys from {sorted(base)}")
        base.update(obj)
    base.update(fixed)
    return ModelConfig(**base)


def cmd_train_toy(args) -> dict:
    cb = codec.load_codebook(args.codebook)
    rows = read_manifest(args.manifest)
    vocab = Vocab.from_texts(r["instruction"] for r in rows)
    cfg_over = json.loads(args.model) if isinstance(args.model, str) else (args.model or {})
    vocab_size = max(cfg_over.get("vocab_size", 64), vocab.size)
    cfg = _model_config(args.model, codebook_size=cb.size, patch=cb.patch, vocab_size=vocab_size)
    samples = []
    for r in rows:
        src = quantize(read_ppm(r["source"]), cb)
        tgt = quantize(read_ppm(r["target"]), cb) if "target" in r else None
        samples.append(TrainingSample(src, tokenize_instruction(r["instruction"], vocab), tgt))
    rng = np.random.default_rng(args.seed)
    weights = init_weights(cfg, rng)
    log = train(weights, samples, args.steps, args.lr, rng, args.r_min)
    paths = {"weights": _out(args, "weights.json"), "vocab": _out(args, "vocab.json"), "loss": _out(args, "loss.csv")}
    save_weights(weights, paths["weights"])
    write_text(paths["vocab"], codec.serialize_vocab(vocab))
    write_loss_csv(log, paths["loss"])
    if args.plot:
        from .plotting import plot_loss_curve

        paths["plot"] = _out(args, "loss.png")
        plot_loss_curve([r.step for r in log], [r.loss for r in log], paths["plot"], baseline=math.log(cb.size))
    summary = {**paths, "steps": len(log), "params": weights.num_params()}
    if log:
        summary.update(initial_loss=log[0].loss, final_loss=log[-1].loss)
    return summary


def _edit_inputs(args):
    weights = load_weights(args.weights)
    cb = codec.load_codebook(args.codebook)
    vocab_path = args.vocab or os.path.join(os.path.dirname(os.path.abspath(args.weights)), "vocab.json")
    _require_file(vocab_path)
    vocab = codec.load_vocab(vocab_path)
    if cb.patch != weights.config.patch or cb.size != weights.config.codebook_size:
        raise ValidationError(f"codebook (K={cb.size}, patch={cb.patch}) does not match the model "
                              f"(K={weights.config.codebook_size}, patch={weights.config.patch})", path=args.codebook)
    source = quantize(read_ppm(args.source), cb)
    instr = tokenize_instruction(args.instruction, vocab, _words(args.keywords))
    return weights, cb, source, instr


def write_attention_dump(trace, instr, out_dir, layers=None, passes=1, plot=False) -> dict:
    """Per-layer maps, the consolidated map and its filtered version, each as PGM plus JSON sidecar."""
    os.makedirs(out_dir, exist_ok=True)
    normed = normalize_cross_attention(trace)
    tokens = [int(i) for i in instr.keyword_indices]
    per_layer = []
    for label, mat in zip(trace.labels, normed):
        lmap = localization_score(trace, [label], tokens)
        base = os.path.join(out_dir, f"layer_{label}")
        with open(base + ".pgm", "wb") as fh:
            fh.write(map_to_pgm(lmap.scores, trace.h, trace.w))
        write_text(base + ".json", map_sidecar(lmap, label=label, words=list(instr.words), matrix=mat.tolist()))
        per_layer.append((label, lmap.grid))
    cons = localization_score(trace, layers, tokens)
    filt = adaptive_filter(cons, passes)
    for name, lmap in (("consolidated", cons), ("filtered", filt)):
        base = os.path.join(out_dir, name)
        with open(base + ".pgm", "wb") as fh:
            fh.write(map_to_pgm(lmap.scores, trace.h, trace.w))
        extra = {"degenerate": lmap.degenerate} if lmap.filtered else {}
        write_text(base + ".json", map_sidecar(lmap, **extra))
    result = {"dir": out_dir, "layers": len(per_layer)}
    if plot:
        from .plotting import plot_attention_maps

        result["plot"] = os.path.join(out_dir, "attention.png")
        plot_attention_maps(per_layer, result["plot"], consolidated=cons.grid)
    return result


def cmd_edit(args) -> dict:
    weights, cb, source, instr = _edit_inputs(args)
    cfg = SamplerConfig(
        steps=args.steps, gamma=args.gamma, lam=args.lam, temperature=args.temperature, seed=args.seed,
        layers=_words(args.layers), keywords=_words(args.keywords), policy=args.policy,
        filter_passes=args.filter_passes, lock_held=not args.unlock_held,
    )
    edited, diag = edit(source, instr, cfg, weights, keep_trace=args.dump_attn)
    paths = {"image": _out(args, "edited.ppm"), "grid": _out(args, "edited_grid.json"),
             "diagnostics": _out(args, "diagnostics.json")}
    img = dequantize(edited, cb)
    write_ppm(img, paths["image"])
    write_text(paths["grid"], codec.serialize_grid(edited))
    write_text(paths["diagnostics"], diag.to_json(timing=not args.no_timing))
    if args.dump_attn:
        write_attention_dump(diag.trace, instr, _out(args, "attn"), cfg.layers, 1 if cfg.filter_passes is None
                             else cfg.filter_passes)
        paths["attn"] = _out(args, "attn")
    if args.plot:
        from .plotting import plot_edit

        held = np.zeros(edited.n)
        held[diag.hold] = 1.0
        paths["plot"] = _out(args, "edit.png")
        plot_edit(dequantize(source, cb).pixels, img.pixels, held.reshape(edited.h, edited.w), paths["plot"])
    changed = int(np.count_nonzero(edited.tokens != source.tokens))
    summary = {**paths, "held": int(diag.hold.size), "changed_tokens": changed}
    if not args.no_timing:
        summary["elapsed_ms"] = diag.elapsed_ms
    return summary


def cmd_dump_attn(args) -> dict:
    weights, cb, source, instr = _edit_inputs(args)
    masked = codec.MaskedGrid.full(source.h, source.w, source.codebook_size)
    res = forward(weights, masked, instr, source, 1.0, args.gamma, capture=True)
    return write_attention_dump(res.trace, instr, args.out_dir, _words(args.layers), args.filter_passes, args.plot)


def cmd_eval_leakage(args) -> dict:
    metrics = eval_leakage(read_ppm(args.source), read_ppm(args.edited), read_pgm(args.mask),
                           codec.load_codebook(args.codebook))
    path = _out(args, "leakage.json")
    write_text(path, canonical_json(metrics))
    return {"report": path, **metrics}


# --------------------------------------------------------------------------
# Validation


def _roundtrip(kind, data: bytes, rebuilt: bytes, path):
    if data != rebuilt:
        raise ValidationError(f"{kind} does not round-trip byte-exactly", path=path)
    return kind


def _validate_json(text: str, path) -> str:
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"invalid JSON ({exc.msg})", offset=exc.pos, path=path) from None
    keys = set(obj) if isinstance(obj, dict) else set()
    b = text.encode()
    if keys == {"h", "w", "codebook_size", "tokens"}:
        return _roundtrip("token-grid", b, codec.serialize_grid(codec.deserialize_grid(text)).encode(), path)
    if keys == {"patch", "entries"}:
        return _roundtrip("codebook", b, codec.serialize_codebook(codec.deserialize_codebook(text)).encode(), path)
    if keys == {"words"}:
        return _roundtrip("vocab", b, codec.serialize_vocab(codec.deserialize_vocab(text)).encode(), path)
    if keys == {"config", "tensors"}:
        return _roundtrip("weights", b, weights_to_json(weights_from_json(text)).encode(), path)
    if "per_step" in keys:
        kind = "diagnostics"
        if not {"per_step", "s_L", "hold_set"} <= keys <= {"per_step", "s_L", "hold_set", "elapsed_ms"}:
            raise ValidationError("diagnostics: unexpected keys", path=path)
        step_keys = {"k", "revealed", "held", "masked"} | ({"elapsed_ms"} if "elapsed_ms" in keys else set())
        if not all(isinstance(s, dict) and set(s) == step_keys for s in obj["per_step"]):
            raise ValidationError("diagnostics: malformed per-step record", path=path)
    elif {"h", "w", "filtered", "layers", "tokens", "scores"} <= keys:
        kind = "attention-map"
        if len(obj["scores"]) != obj["h"] * obj["w"]:
            raise ValidationError("attention map: score count does not match h*w", path=path)
    elif keys == {"pixel_l1_outside", "token_flip_rate_outside", "outside_pixels", "outside_tokens",
                  "flipped_tokens"}:
        kind = "leakage"
    else:
        raise ValidationError(f"unrecognized JSON document with keys {sorted(keys)}", path=path)
    return _roundtrip(kind, b, canonical_json(obj).encode(), path)


def _validate_csv(text: str, path) -> str:
    rows = list(csv.reader(io.StringIO(text)))
    if not rows or rows[0] != ["step", "loss", "mask_rate", "masked"]:
        raise ValidationError("loss CSV: bad header", path=path)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(rows[0])
    try:
        for i, r in enumerate(rows[1:]):
            if len(r) != 4 or int(r[0]) != i:
                raise ValueError
            w.writerow([int(r[0]), repr(float(r[1])), repr(float(r[2])), int(r[3])])
    except ValueError:
        raise ValidationError(f"loss CSV: malformed row {i + 1}", path=path) from None
    return _roundtrip("loss-csv", text.encode(), buf.getvalue().encode(), path)


_PNG_SIG = b"\x89PNG\r\n\x1a\n"


def validate_file(path) -> str:
    """Return the detected format name, or raise if the file does not round-trip."""
    with open(path, "rb") as fh:
        data = fh.read()
    if data.startswith(b"P6"):
        return _roundtrip("ppm", data, codec.encode_ppm(codec.decode_ppm(data, path)), path)
    if data.startswith(b"P5"):
        return _roundtrip("pgm", data, codec.encode_pgm(codec.decode_pgm(data, path)), path)
    if data.startswith(_PNG_SIG):
        if not data.endswith(b"IEND\xaeB`\x82"):
            raise ValidationError("PNG is truncated", path=path)
        return "png"
    try:
        text = data.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise ParseError("not UTF-8 text", offset=exc.start, path=path) from None
    if text.startswith("step,"):
        return _validate_csv(text, path)
    if path.endswith(".jsonl"):
        read_manifest(path)
        return "manifest"
    return _validate_json(text, path)


def cmd_validate(args) -> dict:
    return {"files": [{"path": f, "format": validate_file(f)} for f in args.files]}


_HANDLERS = {
    "make-codebook": cmd_make_codebook,
    "make-image": cmd_make_image,
    "tokenize": cmd_tokenize,
    "detokenize": cmd_detokenize,
    "train-toy": cmd_train_toy,
    "edit": cmd_edit,
    "dump-attn": cmd_dump_attn,
    "eval-leakage": cmd_eval_leakage,
    "validate": cmd_validate,
}


def _fail(code: str, message: str, path=None) -> int:
    sys.stderr.write(canonical_json({"code": code, "message": message, "path": path}))
    return EXIT_ERROR


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        if args.command is None:
            raise UsageError("no subcommand given; see --help")
        args = _resolve(args)
        _emit(_HANDLERS[args.command](args))
    except MGTError as exc:
        return _fail(exc.code, exc.message, exc.path)
    except OSError as exc:
        return _fail("io_error", exc.strerror or str(exc), exc.filename)
    return 0
