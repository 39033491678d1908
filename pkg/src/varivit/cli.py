"""Command-line entry point.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric error.
Every command writes ``invocation.txt`` under ``--out`` with the exact
arguments it ran with.
"""

from __future__ import annotations

import argparse
import csv
import shlex
import sys
from pathlib import Path

from . import bench, data, posemb
from .encoder import STRATEGIES, ModelConfig, VariViT
from .numerics import Rng, write_tensor
from .patchify import extract_patches, grid_shape
from .train import TrainConfig, predict_features, train_loop

EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _int_list(text: str) -> list[int]:
    try:
        return [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def read_config(path) -> dict[str, str]:
    """``key=value`` lines; ``#`` starts a comment."""
    out = {}
    for line in Path(path).read_text().splitlines():
        line = line.split("#", 1)[0].strip()
        if line:
            k, sep, v = line.partition("=")
            if not sep:
                raise UsageError(f"{path}: malformed line {line!r}")
            out[k.strip().replace("-", "_")] = v.strip()
    return out


def _write_invocation(out: Path, argv, args) -> None:
    out.mkdir(parents=True, exist_ok=True)
    lines = ["argv=" + " ".join(shlex.quote(a) for a in argv)]
    lines += [f"{k}={v}" for k, v in sorted(vars(args).items()) if k != "func"]
    (out / "invocation.txt").write_text("\n".join(lines) + "\n")


def _model_config(args, edges) -> ModelConfig:
    preset = ModelConfig.paper if args.preset == "paper" else ModelConfig.tiny
    kw = {"posemb": getattr(args, "posemb", "center_select"), "max_image_edge": max(edges)}
    if getattr(args, "patch", None):
        kw["patch_size"] = args.patch
    if getattr(args, "classes", None):
        kw["num_classes"] = args.classes
    cfg = preset(**kw)
    for e in edges:
        grid_shape((e,) * 3, cfg.patch_size)
    return cfg


def _split(vols, test_frac: float, seed: int):
    """Stratified split keyed only by the seed."""
    if test_frac <= 0:
        return vols, []
    rng = Rng(seed).child(7)
    test = set()
    for label in sorted({v.label for v in vols}):
        idx = [i for i, v in enumerate(vols) if v.label == label]
        idx = rng.gen.permutation(idx)
        test.update(int(i) for i in idx[:int(round(test_frac * len(idx)))])
    return [v for i, v in enumerate(vols) if i not in test], [v for i, v in enumerate(vols) if i in test]


# ---------------------------------------------------------------------------
# commands


def cmd_gendata(args):
    if not args.edges or any(e % args.patch for e in args.edges):
        raise UsageError(f"every edge in {args.edges} must be a positive multiple of --patch {args.patch}")
    bins = data.SizeBins.for_edges(sorted(args.edges))
    vols = data.generate_dataset(args.seed, args.per_bin, bins, args.classes, args.patch)
    man = data.write_dataset(vols, args.out, args.seed)
    print(f"wrote {len(man)} volumes to {args.out} (classes {man.class_counts})")


def cmd_train(args):
    _, vols = data.read_dataset(args.data)
    edges = sorted({v.edge for v in vols})
    if args.classes is None:
        args.classes = max(v.label for v in vols) + 1
    mcfg = _model_config(args, edges)
    train_vols, test_vols = _split(vols, args.test_frac, args.seed)
    tcfg = TrainConfig(base_lr=args.lr, weight_decay=args.weight_decay,
                       warmup_epochs=min(args.warmup, args.epochs), total_epochs=args.epochs,
                       batch_size=args.batch_size, seed=args.seed)
    model = VariViT(mcfg, seed=args.seed)

    def log(rec):
        tr, te = rec if isinstance(rec, tuple) else (rec, None)
        msg = f"epoch {tr.epoch:3d} loss {tr.loss:.4f} acc {tr.accuracy:.3f}"
        if te is not None:
            msg += f" | test loss {te.loss:.4f} acc {te.accuracy:.3f} auc {te.auc:.3f}"
        print(msg, flush=True)

    records = train_loop(model, train_vols, tcfg, args.mode, test_vols, args.out,
                         log=None if args.quiet else log)
    last = [r for r in records if r.epoch == tcfg.total_epochs - 1]
    summary = Path(args.out) / "final.csv"
    with open(summary, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["posemb", "mode", "split", "accuracy", "auc", "f1", "mcc"])
        for r in last:
            w.writerow([mcfg.posemb, args.mode, r.split, f"{r.accuracy:.6f}", f"{r.auc:.6f}",
                        f"{r.f1:.6f}", f"{r.mcc:.6f}"])


def cmd_bench(args):
    if args.data:
        _, vols = data.read_dataset(args.data)
    else:
        bins = data.SizeBins.for_edges(args.edges)
        vols = data.generate_dataset(args.seed, args.per_bin, bins, 2, args.patch or 16)
    edges = sorted({v.edge for v in vols})
    args.classes = max(v.label for v in vols) + 1
    mcfg = _model_config(args, edges)
    report = bench.run_bench(vols, mcfg, args.modes, args.repeats, args.batch_size, args.seed)
    print(bench.emit_report(report, args.out), end="")


def cmd_export_sim(args):
    out = Path(args.out)
    if args.checkpoint:
        model = VariViT.load(args.checkpoint)
        if "pos" not in model.params:
            raise UsageError("checkpoint has no learned positional grid")
        master = posemb.PosEmbedGrid(model.params["pos"], posemb.LEARNED)
        patch = model.cfg.patch_size
    else:
        patch = args.patch
        for e in args.edges:
            grid_shape((e,) * 3, patch)
        master = posemb.build_sinusoidal_3d((max(args.edges) // patch,) * 3, args.dim)
    for e in sorted(args.edges):
        g = (e // patch,) * 3
        sub = posemb.center_and_select(master, g).reshape(g + (master.dim,))
        anchor = tuple(args.anchor) if args.anchor else posemb.center(g)
        posemb.export_similarity(sub, anchor, out / f"sim_{e}")
        print(f"edge {e}: grid {g}, anchor {anchor} -> {out / f'sim_{e}'}.{{vvt,csv}}")


def cmd_export_embeddings(args):
    model = VariViT.load(args.checkpoint)
    man, vols = data.read_dataset(args.data)
    feats = predict_features(model, vols)
    out = Path(args.out)
    write_tensor(out / "embeddings.vvt", feats)
    with open(out / "embeddings_index.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["row", "sample_id", "label", "crop_edge"])
        for i, v in enumerate(vols):
            w.writerow([i, v.sample_id, v.label, v.edge])
    print(f"wrote {feats.shape[0]} embeddings of dim {feats.shape[1]}")


def cmd_attn(args):
    model = VariViT.load(args.checkpoint)
    _, vols = data.read_dataset(args.data)
    if model.cfg.depth == 0:
        raise UsageError("model has no attention layers")
    layer = args.layer % model.cfg.depth
    out = Path(args.out) / "attn"
    out.mkdir(parents=True, exist_ok=True)
    for v in vols[:args.limit] if args.limit else vols:
        x = extract_patches(v.voxels, model.cfg.patch_size)[None]
        _, cache = model.forward(x, grid_shape(v.spatial, model.cfg.patch_size))
        write_tensor(out / f"{v.sample_id:06d}.vvt", model.cls_attention(cache, layer))
    print(f"wrote CLS attention grids (layer {layer}) to {out}")


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="varivit", description="Variable-size 3D ViT toolkit")
    p.add_argument("--config", help="key=value defaults file; flags override it")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gendata", help="generate a synthetic dataset")
    g.add_argument("--classes", type=int, default=2)
    g.add_argument("--per-bin", type=int, default=10)
    g.add_argument("--edges", type=_int_list, default=list(data.DEFAULT_EDGES))
    g.add_argument("--patch", type=int, default=16)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gendata)

    t = sub.add_parser("train", help="train one model")
    t.add_argument("--data", required=True)
    t.add_argument("--mode", choices=["cbs", "ga", "pad"], default="cbs")
    t.add_argument("--posemb", choices=STRATEGIES, default="center_select")
    t.add_argument("--preset", choices=["paper", "tiny"], default="tiny")
    t.add_argument("--patch", type=int, help="override the preset patch size")
    t.add_argument("--classes", type=int)
    t.add_argument("--epochs", type=int, default=50)
    t.add_argument("--warmup", type=int, default=5)
    t.add_argument("--lr", type=float, default=1e-3)
    t.add_argument("--weight-decay", type=float, default=0.05)
    t.add_argument("--batch-size", type=int, default=8)
    t.add_argument("--test-frac", type=float, default=0.33)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--quiet", action="store_true")
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_train)

    b = sub.add_parser("bench", help="time batching modes against pad-to-max")
    b.add_argument("--modes", type=lambda s: [m for m in s.split(",") if m], default=["cbs", "ga", "pad"])
    b.add_argument("--repeats", type=int, default=5)
    b.add_argument("--data", help="dataset dir; generated when omitted")
    b.add_argument("--per-bin", type=int, default=8)
    b.add_argument("--edges", type=_int_list, default=list(data.DEFAULT_EDGES))
    b.add_argument("--preset", choices=["paper", "tiny"], default="tiny")
    b.add_argument("--patch", type=int, default=16)
    b.add_argument("--batch-size", type=int, default=8)
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--out", required=True)
    b.set_defaults(func=cmd_bench)

    pe = sub.add_parser("posemb", help="positional-embedding tools")
    pesub = pe.add_subparsers(dest="posemb_command", required=True, parser_class=_Parser)
    es = pesub.add_parser("export-sim", help="cosine-similarity maps per image size")
    es.add_argument("--edges", type=_int_list, default=list(data.DEFAULT_EDGES))
    es.add_argument("--patch", type=int, default=16)
    es.add_argument("--dim", type=int, default=384)
    es.add_argument("--anchor", type=_int_list, help="l,h,w within each grid (default: grid center)")
    es.add_argument("--checkpoint", help="use the learned grid of this checkpoint")
    es.add_argument("--out", required=True)
    es.set_defaults(func=cmd_export_sim)

    ee = sub.add_parser("export-embeddings", help="final CLS features per sample")
    ee.add_argument("--checkpoint", required=True)
    ee.add_argument("--data", required=True)
    ee.add_argument("--out", required=True)
    ee.set_defaults(func=cmd_export_embeddings)

    at = sub.add_parser("attn", help="CLS attention grid per sample")
    at.add_argument("--checkpoint", required=True)
    at.add_argument("--data", required=True)
    at.add_argument("--layer", type=int, default=-1)
    at.add_argument("--limit", type=int, default=0)
    at.add_argument("--out", required=True)
    at.set_defaults(func=cmd_attn)
    return p


def _find_subparser(parser, argv):
    """The (sub)subparser named by the positional words of ``argv``."""
    sp = parser
    words = iter(a for a in argv if not a.startswith("-"))
    while True:
        action = next((a for a in sp._actions if isinstance(a, argparse._SubParsersAction)), None)
        if action is None:
            return sp
        name = next((w for w in words if w in action.choices), None)
        if name is None:
            return sp
        sp = action.choices[name]


def _apply_config(parser, argv, path) -> None:
    """Turn ``key=value`` lines into defaults of the selected subcommand."""
    sp = _find_subparser(parser, argv)
    conf = read_config(path)
    actions = {a.dest: a for a in sp._actions}
    unknown = set(conf) - set(actions)
    if unknown:
        raise UsageError(f"unknown config keys: {sorted(unknown)}")
    for dest, val in conf.items():
        a = actions[dest]
        if isinstance(a, argparse._StoreTrueAction):
            a.default = val.lower() in ("1", "true", "yes")
        else:
            try:
                a.default = a.type(val) if a.type else val
            except (ValueError, argparse.ArgumentTypeError):
                raise UsageError(f"config value {val!r} for {dest} is not valid")
            if a.choices and a.default not in a.choices:
                raise UsageError(f"config value {val!r} for {dest} not in {list(a.choices)}")
        a.required = False


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        pre = argparse.ArgumentParser(add_help=False)
        pre.add_argument("--config")
        known, rest = pre.parse_known_args(argv)
        if known.config:
            # flags parsed afterwards win over file values
            _apply_config(parser, rest, known.config)
        args = parser.parse_args(argv)
        out = Path(args.out)
        _write_invocation(out, argv, args)
        args.func(args)
    except UsageError as e:
        print(f"varivit: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except FloatingPointError as e:
        print(f"varivit: numeric error: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ValueError, OSError) as e:
        print(f"varivit: data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except SystemExit as e:
        return int(e.code or 0)
    return 0


if __name__ == "__main__":
    sys.exit(main())
