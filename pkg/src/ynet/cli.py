"""Command-line interface.

Subcommands: synth, train, encode, index, query, eval, serve. Exit codes:
0 success, 1 usage error, 2 runtime error. All randomness flows from
--seed; defaults can come from a key=value --config file (see README for
the key list; explicit flags win over the file).
"""

from __future__ import annotations

import argparse
import dataclasses
import os
import sys
from pathlib import Path

import numpy as np

from . import index as index_mod
from .checkpoint import load_checkpoint, save_checkpoint
from .data import decode_image_bytes, load_dataset, synth_generate
from .errors import YNetError
from .evaluation import run_benchmark, score_ranked, EvalReport
from .hashing import HashConfig, encode, plan_aggregation
from .losses import CircleLossConfig, CoupledLossConfig
from .model import YNetConfig, forward_backbone, build_model
from .nn import Tensor
from .server import DEFAULT_PORT, build_state, serve_forever
from .trainer import TrainConfig, kfold_select, train


class UsageError(Exception):
    pass


class Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}\n{self.format_usage()}")


def read_config_file(path) -> dict[str, str]:
    """key = value lines; '#' starts a comment; keys are dotted names."""
    out: dict[str, str] = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise YNetError(f"{path}:{lineno}: expected key = value")
        key, value = (part.strip() for part in line.split("=", 1))
        out[key] = value
    return out


def _cfg_get(cfg: dict[str, str], key: str, cast, default):
    if key in cfg:
        return cast(cfg[key])
    return default


def _build_parser() -> Parser:
    p = Parser(prog="ynet", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("synth", help="generate a synthetic dataset")
    sp.add_argument("--scenario", required=True, choices=["spdd", "dpsd"])
    sp.add_argument("--n", type=int, required=True)
    sp.add_argument("--image-size", type=int, default=64)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", required=True)

    tp = sub.add_parser("train", help="train a model on a dataset directory")
    tp.add_argument("--data", required=True)
    tp.add_argument("--out", required=True, help="checkpoint path to write")
    tp.add_argument("--config", help="key=value config file")
    tp.add_argument("--profile", choices=["tiny", "paper"], default="tiny")
    tp.add_argument("--epochs", type=int)
    tp.add_argument("--seed", type=int)
    tp.add_argument("--batch-size", type=int)
    tp.add_argument("--lr", type=float)
    tp.add_argument("--branches", choices=["both", "rmac_only", "fpn_only"])
    tp.add_argument("--kfold", action="store_true", help="5-fold selection instead of a single run")
    tp.add_argument("--history", help="write per-step loss CSV here")

    ep = sub.add_parser("encode", help="hash a dataset directory with a checkpoint")
    ep.add_argument("--checkpoint", required=True)
    ep.add_argument("--data", required=True)
    ep.add_argument("--code-length", type=int)
    ep.add_argument("--out", required=True, help="codes CSV path")

    ip = sub.add_parser("index", help="build a YNIX index from a codes CSV")
    ip.add_argument("--codes", required=True)
    ip.add_argument("--out", required=True)

    qp = sub.add_parser("query", help="top-k search for one image")
    qp.add_argument("--index", required=True)
    qp.add_argument("--checkpoint", required=True)
    qp.add_argument("--image", required=True)
    qp.add_argument("--topk", type=int, default=10)

    vp = sub.add_parser("eval", help="retrieval benchmark; CSV on stdout")
    vp.add_argument("--checkpoint", required=True)
    vp.add_argument("--gallery", required=True)
    vp.add_argument("--queries", required=True)
    vp.add_argument("--index", help="reuse a prebuilt index (restricts to its k)")
    vp.add_argument("--code-lengths", default="64", help="comma list, e.g. 36,64,128,256")
    vp.add_argument("--cutoffs", default="10", help="comma list, e.g. 5,10,20,50")
    vp.add_argument("--out", help="also write the CSV here")

    rp = sub.add_parser("serve", help="start the HTTP query service")
    rp.add_argument("--checkpoint", required=True)
    rp.add_argument("--gallery", required=True)
    rp.add_argument("--index", help="load a YNIX index instead of encoding the gallery")
    rp.add_argument("--port", type=int, default=None)
    rp.add_argument("--web-dir", help="static bundle directory to serve at /")
    return p


def _cmd_synth(args) -> int:
    synth_generate(args.scenario, args.n, args.image_size, args.seed, args.out)
    print(f"wrote {args.n} {args.scenario} samples to {args.out}")
    return 0


def _cmd_train(args) -> int:
    filecfg = read_config_file(args.config) if args.config else {}
    samples = load_dataset(args.data)
    num_classes = _cfg_get(filecfg, "model.num_classes", int, max(s.label for s in samples) + 1)
    input_size = _cfg_get(filecfg, "model.input_size", int, 64 if args.profile == "tiny" else 256)
    code_length = _cfg_get(filecfg, "model.code_length", int, 64)
    model_cfg = YNetConfig(num_classes=num_classes, input_size=input_size, code_length=code_length)
    if samples[0].image.shape[1] != model_cfg.input_size:
        raise YNetError(
            f"dataset images are {samples[0].image.shape[1]}px but the profile expects {model_cfg.input_size}px"
        )

    loss_cfg = CoupledLossConfig(
        omega=_cfg_get(filecfg, "loss.omega", float, 0.5),
        mode=_cfg_get(filecfg, "loss.mode", str, "magnitude-balanced"),
        ema_decay=_cfg_get(filecfg, "loss.ema_decay", float, 0.9),
    )
    circle_cfg = CircleLossConfig(
        gamma=_cfg_get(filecfg, "circle.gamma", float, 32.0),
        margin=_cfg_get(filecfg, "circle.margin", float, 0.25),
    )
    train_cfg = TrainConfig(
        epochs=args.epochs if args.epochs is not None else _cfg_get(filecfg, "epochs", int, 50),
        seed=args.seed if args.seed is not None else _cfg_get(filecfg, "seed", int, 0),
        lr=args.lr if args.lr is not None else _cfg_get(filecfg, "lr", float, 0.01),
        momentum=_cfg_get(filecfg, "momentum", float, 0.9),
        weight_decay=_cfg_get(filecfg, "weight_decay", float, 0.001),
        batch_size=args.batch_size if args.batch_size is not None else _cfg_get(filecfg, "batch_size", int, 32),
        loss=loss_cfg,
        circle=circle_cfg,
        folds=_cfg_get(filecfg, "folds", int, 5),
        branches=args.branches if args.branches else _cfg_get(filecfg, "branches", str, "both"),
    )
    if train_cfg.batch_size > len(samples):
        train_cfg = dataclasses.replace(train_cfg, batch_size=len(samples))

    if args.kfold:
        params, scores = kfold_select(samples, model_cfg, train_cfg)
        print("fold scores: " + ", ".join(f"{s:.4f}" for s in scores))
        history = None
    else:
        params = build_model(model_cfg, seed=train_cfg.seed)
        params, history = train(params, samples, train_cfg)
    save_checkpoint(params, args.out)
    print(f"checkpoint written to {args.out}")
    if args.history and history is not None:
        Path(args.history).write_text(history.to_csv())
        print(f"history written to {args.history}")
    return 0


def _encode_dir(params, data_dir, k: int):
    samples = load_dataset(data_dir)
    cfg = params.config
    hash_cfg = HashConfig(k=k, plan=plan_aggregation(k, cfg.core_channels, cfg.core_hw, cfg.core_hw))
    codes = []
    for s in samples:
        core = forward_backbone(params, Tensor(s.image.astype(params.stem_conv.dtype)), "eval").core
        codes.append(encode(core, hash_cfg))
    return samples, codes, hash_cfg


def _cmd_encode(args) -> int:
    params = load_checkpoint(args.checkpoint)
    k = args.code_length or params.config.code_length
    samples, codes, _ = _encode_dir(params, args.data, k)
    lines = ["id,k,code"]
    for s, c in zip(samples, codes):
        lines.append(f"{s.id},{c.k},{c.bits.astype('<u8').tobytes().hex()}")
    Path(args.out).write_text("\n".join(lines) + "\n")
    print(f"encoded {len(samples)} images at k={k} -> {args.out}")
    return 0


def _cmd_index(args) -> int:
    rows = Path(args.codes).read_text().splitlines()
    if not rows or rows[0] != "id,k,code":
        raise YNetError(f"bad codes CSV header in {args.codes}")
    ids, packed, k = [], [], None
    for line in rows[1:]:
        sid, ks, hexcode = line.split(",")
        k = int(ks) if k is None else k
        if int(ks) != k:
            raise YNetError("mixed code lengths in codes CSV")
        ids.append(sid)
        packed.append(np.frombuffer(bytes.fromhex(hexcode), dtype="<u8"))
    idx = index_mod.build_from_packed(np.stack(packed), ids, k)
    index_mod.save(idx, args.out)
    print(f"index with {len(idx)} entries written to {args.out}")
    return 0


def _cmd_query(args) -> int:
    params = load_checkpoint(args.checkpoint)
    idx = index_mod.load(args.index)
    cfg = params.config
    hash_cfg = HashConfig(k=idx.k, plan=plan_aggregation(idx.k, cfg.core_channels, cfg.core_hw, cfg.core_hw))
    image = decode_image_bytes(Path(args.image).read_bytes(), cfg.input_size)
    core = forward_backbone(params, Tensor(image.astype(params.stem_conv.dtype)), "eval").core
    for sid, dist in index_mod.query_topk(idx, encode(core, hash_cfg), args.topk):
        print(f"{sid} {dist}")
    return 0


def _cmd_eval(args) -> int:
    params = load_checkpoint(args.checkpoint)
    gallery = load_dataset(args.gallery)
    queries = load_dataset(args.queries)
    cutoffs = [int(x) for x in args.cutoffs.split(",")]
    if args.index:
        idx = index_mod.load(args.index)
        cfg = params.config
        hash_cfg = HashConfig(k=idx.k, plan=plan_aggregation(idx.k, cfg.core_channels, cfg.core_hw, cfg.core_hw))
        ranked = []
        for q in queries:
            core = forward_backbone(params, Tensor(q.image.astype(params.stem_conv.dtype)), "eval").core
            ranked.append(index_mod.query_topk(idx, encode(core, hash_cfg), max(cutoffs)))
        rows = score_ranked(ranked, queries, gallery, cutoffs, idx.k)
        report = EvalReport(rows=rows, config={"model": cfg.to_dict(), "code_lengths": [idx.k], "cutoffs": cutoffs})
    else:
        code_lengths = [int(x) for x in args.code_lengths.split(",")]
        report = run_benchmark(params, gallery, queries, code_lengths, cutoffs)
    csv_text = report.to_csv()
    sys.stdout.write(csv_text)
    if args.out:
        Path(args.out).write_text(csv_text)
    return 0


def _cmd_serve(args) -> int:
    params = load_checkpoint(args.checkpoint)
    idx = index_mod.load(args.index) if args.index else None
    k = idx.k if idx is not None else None
    state = build_state(params, gallery_dir=args.gallery, index=idx, k=k, web_dir=args.web_dir)
    port = args.port if args.port is not None else int(os.environ.get("YNET_PORT", DEFAULT_PORT))
    entries = 0 if state.index is None else len(state.index)
    print(f"serving on port {port} with {entries} indexed images")
    serve_forever(state, port)
    return 0


_COMMANDS = {
    "synth": _cmd_synth,
    "train": _cmd_train,
    "encode": _cmd_encode,
    "index": _cmd_index,
    "query": _cmd_query,
    "eval": _cmd_eval,
    "serve": _cmd_serve,
}


def run_cli(argv) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        sys.stderr.write(str(e) + "\n")
        return 1
    try:
        return _COMMANDS[args.command](args)
    except YNetError as e:
        sys.stderr.write(f"error: {e}\n")
        return 2
    except OSError as e:
        sys.stderr.write(f"error: {e}\n")
        return 2


def main() -> None:
    sys.exit(run_cli(sys.argv[1:]))


if __name__ == "__main__":
    main()
