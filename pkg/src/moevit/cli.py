"""Command-line surface: verify | count-params | pretrain | finetune | train | eval.

Run configuration comes from three layers, later overriding earlier: built-in
defaults (the published recipes), a flat key=value config file (--config), and
explicit flags. Every training run writes its resolved configuration and a CSV
loss log next to its checkpoints. The dataset root can be set once via the
MOEVIT_DATA_ROOT environment variable instead of passing --data each time.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from .data import AugmentConfig, load_cifar, make_synthetic
from .errors import ConfigError, DataError, MoevitError
from .mae import MAEDecoder, MMLiT
from .model import MLiT, count_params_closed_form, preset
from .rng import RngStreams
from .train import evaluate_accuracy, load_encoder_weights, pretrain_mae, train_classifier
from .verify import decoder_param_count, format_report, run_verification

_SIZES = ("S", "XS", "XXS")


def _add_config_arg(p):
    p.add_argument("--config", help="flat key=value file; flags override its entries")


def _add_model_args(p):
    p.add_argument("--size", default="XXS", choices=_SIZES, help="encoder preset")
    p.add_argument("--classes", type=int, default=100)
    p.add_argument("--sharing-mode", default="V+W2", choices=("V+W2", "V+W", "W+W2"))
    p.add_argument("--squared-cv", action="store_true", help="square the balance-loss CV terms")
    p.add_argument("--w-importance", type=float, default=1e-2)
    p.add_argument("--w-load", type=float, default=1e-2)


def _add_data_args(p):
    p.add_argument("--dataset", default="synthetic", choices=("synthetic", "cifar10", "cifar100"))
    p.add_argument("--data", help="dataset .bin path (default: $MOEVIT_DATA_ROOT/<dataset>/<split>.bin)")
    p.add_argument("--num-images", type=int, default=512, help="synthetic dataset size")
    p.add_argument("--limit", type=int, default=0, help="use only the first N images (0 = all)")


def _add_train_args(p, base_lr: float, crop_lo: float):
    # required, but enforced after config-file merging (see parse_args)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int, default=0, help="0 = recipe default for the command/size")
    p.add_argument("--base-lr", type=float, default=base_lr)
    p.add_argument("--warmup-epochs", type=int, default=-1, help="-1 = 5%% of total epochs")
    p.add_argument("--weight-decay", type=float, default=0.05)
    p.add_argument("--crop-lo", type=float, default=crop_lo)
    p.add_argument("--crop-hi", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="directory for checkpoints, logs, resolved config")
    p.add_argument("--save-every", type=int, default=0, help="checkpoint every N epochs (0 = final only)")
    p.add_argument("--resume", help="checkpoint to resume from")
    p.add_argument("--drop-last", action="store_true")


def build_parser() -> tuple[argparse.ArgumentParser, dict]:
    parser = argparse.ArgumentParser(prog="moevit", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("verify", help="replay the published worked examples")
    _add_config_arg(p)

    p = sub.add_parser("count-params", help="parameter-count breakdown for a preset")
    _add_config_arg(p)
    p.add_argument("--size", default="XXS", choices=_SIZES + ("decoder",))
    p.add_argument("--include-head", action="store_true")
    p.add_argument("--classes", type=int, default=100)
    p.add_argument("--sharing-mode", default="V+W2", choices=("V+W2", "V+W", "W+W2"))
    p.add_argument("--encoder-size", default="S", choices=_SIZES, help="encoder the decoder attaches to")
    p.add_argument("--decoder-pos-table", action="store_true", help="count a hypothetical decoder positional table")

    p = sub.add_parser("pretrain", help="masked-autoencoder pre-training")
    _add_config_arg(p)
    _add_model_args(p)
    _add_data_args(p)
    _add_train_args(p, base_lr=3e-4, crop_lo=0.6)
    p.add_argument("--alpha", type=float, default=0.1, help="unmasked-reconstruction discount")
    p.add_argument("--beta", type=float, default=0.5, help="routing-loss coefficient")
    p.add_argument("--mask-ratio", type=float, default=0.75)
    p.add_argument("--no-decoder-aux", action="store_true", help="drop decoder routing losses from the objective")

    p = sub.add_parser("finetune", help="classification fine-tuning from a pre-training checkpoint")
    _add_config_arg(p)
    _add_model_args(p)
    _add_data_args(p)
    _add_train_args(p, base_lr=5e-3, crop_lo=0.8)
    p.add_argument("--from-checkpoint", help="pre-training checkpoint providing encoder weights")
    p.add_argument("--layerwise-decay", type=float, default=0.9)
    p.add_argument("--beta", type=float, default=0.5)

    p = sub.add_parser("train", help="supervised training from scratch")
    _add_config_arg(p)
    _add_model_args(p)
    _add_data_args(p)
    _add_train_args(p, base_lr=2e-3, crop_lo=0.8)
    p.add_argument("--layerwise-decay", type=float, default=0.0, help="0 disables layer-wise decay")
    p.add_argument("--beta", type=float, default=0.5)

    p = sub.add_parser("eval", help="classification accuracy of a checkpoint")
    _add_config_arg(p)
    _add_data_args(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", default="test", choices=("train", "test"))
    p.add_argument("--batch-size", type=int, default=256)

    return parser, sub.choices


def parse_config_file(path: str) -> dict:
    if not os.path.exists(path):
        raise ConfigError(f"config file not found: {path}")
    out = {}
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected key=value, got {line!r}")
            key, _, value = line.partition("=")
            out[key.strip().replace("-", "_")] = value.strip()
    return out


def _coerce_file_values(values: dict, subparser: argparse.ArgumentParser) -> dict:
    actions = {a.dest: a for a in subparser._actions}
    out = {}
    for key, raw in values.items():
        if key not in actions:
            raise ConfigError(f"unknown config key {key!r}")
        action = actions[key]
        if isinstance(action, (argparse._StoreTrueAction, argparse._StoreFalseAction)):
            out[key] = raw.lower() in ("1", "true", "yes", "on")
        elif action.type is not None:
            out[key] = action.type(raw)
        else:
            out[key] = raw
    return out


def parse_args(argv) -> argparse.Namespace:
    parser, choices = build_parser()
    args = parser.parse_args(argv)
    sub = choices[args.command]
    if getattr(args, "config", None):
        sub.set_defaults(**_coerce_file_values(parse_config_file(args.config), sub))
        args = parser.parse_args(argv)  # explicit flags still take precedence
    for dest, flag in (("epochs", "--epochs"), ("from_checkpoint", "--from-checkpoint")):
        if hasattr(args, dest) and getattr(args, dest) is None:
            sub.error(f"the following arguments are required: {flag}")
    return args


def _resolve_data_path(args, split: str) -> str:
    if args.data:
        return args.data
    root = os.environ.get("MOEVIT_DATA_ROOT")
    if not root:
        raise DataError("no --data path given and MOEVIT_DATA_ROOT is not set")
    return os.path.join(root, args.dataset, f"{split}.bin")


def _load_dataset(args, split: str = "train"):
    if args.dataset == "synthetic":
        ds = make_synthetic(args.num_images, args.classes, np.random.default_rng(args.seed if hasattr(args, "seed") else 0))
    else:
        ds = load_cifar(_resolve_data_path(args, split), args.dataset, split)
    if args.limit:
        ds.images = ds.images[: args.limit]
        ds.labels = ds.labels[: args.limit]
    return ds


def _default_batch(args) -> int:
    if args.batch_size:
        return args.batch_size
    if args.command == "pretrain":
        return 840 if args.size == "S" else 1280
    if args.command == "finetune":
        return 448
    return 128


def _build_model(args) -> MLiT:
    cfg = preset(
        args.size,
        num_classes=args.classes,
        sharing_mode=args.sharing_mode,
        w_importance=args.w_importance,
        w_load=args.w_load,
        squared_cv=args.squared_cv,
    )
    return MLiT(cfg, RngStreams(args.seed).init)


def _run_config(args, batch_size: int) -> dict:
    skip = {"config", "command", "data", "out", "resume"}
    cfg = {k: v for k, v in sorted(vars(args).items()) if k not in skip and v is not None}
    cfg["batch_size"] = batch_size
    return cfg


def _write_run_files(out_dir: str | None, cfg: dict, log_lines: list[str]) -> None:
    if not out_dir:
        return
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "config.txt"), "w") as f:
        for k, v in sorted(cfg.items()):
            f.write(f"{k}={v}\n")
    with open(os.path.join(out_dir, "log.csv"), "w") as f:
        f.write("\n".join(log_lines) + "\n")


def cmd_verify(args) -> int:
    checks = run_verification()
    print(format_report(checks))
    return 0 if all(c.passed for c in checks) else 1


def cmd_count_params(args) -> int:
    if args.size == "decoder":
        total = decoder_param_count(args.encoder_size, args.decoder_pos_table)
        cfg = preset("decoder")
        rows = [
            ("token_proj", preset(args.encoder_size).embed_dim * cfg.embed_dim),
            ("mask_token", cfg.embed_dim),
            ("layers", count_params_closed_form(cfg) - cfg.seq_len * cfg.embed_dim - cfg.patch_dim * cfg.embed_dim - 2 * cfg.embed_dim),
            ("final_norm", 2 * cfg.embed_dim),
            ("out_head", cfg.embed_dim * cfg.patch_dim),
        ]
        if args.decoder_pos_table:
            rows.append(("pos_table", cfg.seq_len * cfg.embed_dim))
        for name, n in rows:
            print(f"{name:24s} {n:>12,d}")
        print(f"{'total':24s} {total:>12,d}  (~{total/1e6:.2f}M)")
        return 0
    cfg = preset(args.size, num_classes=args.classes, sharing_mode=args.sharing_mode)
    model = MLiT(cfg, np.random.default_rng(0))
    groups: dict[str, int] = {}
    for name, p in model.named_parameters():
        if name.startswith("layers."):
            key = ".".join(name.split(".")[:2])
        else:
            key = name.split(".")[0]
        if not args.include_head and key == "head":
            continue
        groups[key] = groups.get(key, 0) + p.size
    total = sum(groups.values())
    for name, n in groups.items():
        print(f"{name:24s} {n:>12,d}")
    print(f"{'total':24s} {total:>12,d}  (~{total/1e6:.2f}M)")
    closed = count_params_closed_form(cfg, include_head=args.include_head)
    if closed != total:
        print(f"WARNING: closed-form count {closed} disagrees with graph walk {total}", file=sys.stderr)
        return 1
    return 0


def cmd_pretrain(args) -> int:
    ds = _load_dataset(args, "train")
    model = MMLiT(_build_model(args), MAEDecoder(preset(args.size).embed_dim, RngStreams(args.seed + 1).init))
    batch = _default_batch(args)
    run_cfg = _run_config(args, batch)
    log_lines = pretrain_mae(
        model,
        ds,
        epochs=args.epochs,
        batch_size=batch,
        base_lr=args.base_lr,
        warmup_epochs=None if args.warmup_epochs < 0 else args.warmup_epochs,
        weight_decay=args.weight_decay,
        alpha=args.alpha,
        beta=args.beta,
        mask_ratio=args.mask_ratio,
        decoder_aux=not args.no_decoder_aux,
        aug=AugmentConfig(crop_scale=(args.crop_lo, args.crop_hi)),
        seed=args.seed,
        out_dir=args.out,
        save_every=args.save_every,
        resume=args.resume,
        config=run_cfg,
        log_fn=print,
        drop_last=args.drop_last,
    )
    _write_run_files(args.out, run_cfg, log_lines)
    return 0


def _classifier_run(args, model: MLiT, layerwise_decay: float | None) -> int:
    ds = _load_dataset(args, "train")
    batch = _default_batch(args)
    run_cfg = _run_config(args, batch)
    log_lines = train_classifier(
        model,
        ds,
        epochs=args.epochs,
        batch_size=batch,
        base_lr=args.base_lr,
        warmup_epochs=None if args.warmup_epochs < 0 else args.warmup_epochs,
        weight_decay=args.weight_decay,
        beta=args.beta,
        layerwise_decay=layerwise_decay,
        aug=AugmentConfig(crop_scale=(args.crop_lo, args.crop_hi)),
        seed=args.seed,
        out_dir=args.out,
        save_every=args.save_every,
        resume=args.resume,
        config=run_cfg,
        log_fn=print,
        drop_last=args.drop_last,
    )
    _write_run_files(args.out, run_cfg, log_lines)
    return 0


def _decay_or_none(value: float) -> float | None:
    return value if value not in (0.0, 1.0) else None


def cmd_finetune(args) -> int:
    model = _build_model(args)
    load_encoder_weights(args.from_checkpoint, model, reinit_head=True)
    return _classifier_run(args, model, _decay_or_none(args.layerwise_decay))


def cmd_train(args) -> int:
    return _classifier_run(args, _build_model(args), _decay_or_none(args.layerwise_decay))


def cmd_eval(args) -> int:
    from .checkpoint import load_checkpoint

    tensors, meta = load_checkpoint(args.checkpoint)
    cfg_meta = meta.get("config", {})
    cfg = preset(
        cfg_meta.get("size", "XXS"),
        num_classes=int(cfg_meta.get("classes", 100)),
        sharing_mode=cfg_meta.get("sharing_mode", "V+W2"),
    )
    model = MLiT(cfg, np.random.default_rng(0))
    model.load_state_arrays({k: v for k, v in tensors.items() if not k.startswith("adam.")})
    args.classes = model.cfg.num_classes
    ds = _load_dataset(args, args.split)
    acc = evaluate_accuracy(model, ds, args.batch_size)
    print(f"accuracy,{acc:.6f}")
    return 0


def main(argv=None) -> int:
    args = parse_args(sys.argv[1:] if argv is None else list(argv))
    handlers = {
        "verify": cmd_verify,
        "count-params": cmd_count_params,
        "pretrain": cmd_pretrain,
        "finetune": cmd_finetune,
        "train": cmd_train,
        "eval": cmd_eval,
    }
    try:
        return handlers[args.command](args)
    except MoevitError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
