"""Command-line harness: generate / train / ablate / bound / eval.

Every output file starts with a provenance header carrying the resolved
configuration and seed. Metrics are CSV with the fixed schema
``round,loss,part_acc,nonpart_acc,kl_mean,timestamp``; the timestamp column
is a deterministic logical clock (cumulative client optimizer steps) so
that identical runs produce byte-identical files.

Exit codes: 0 success, 2 configuration error, 3 I/O or dataset-format
error, 4 runtime numeric failure.
"""

from __future__ import annotations

import argparse
import json
import math
import struct
import sys
from pathlib import Path

import numpy as np

from . import bounds as bounds_mod
from .config import ConfigError, ExperimentConfig, parse_config
from .datagen import (
    DatasetVersionError,
    FederatedDataset,
    MalformedDatasetError,
    load_dataset,
    save_dataset,
)
from .distributions import kl_diag, standard_prior
from .federation import RunResult, evaluate, run_training
from .model import ArchConfig, FedVIParams, ParamBlock
from .nn import NonFiniteError
from .seeding import DOMAIN_ABLATION, DOMAIN_BOUND, substream
from .bounds import SyntheticTask, synthetic_task

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_NUMERIC = 4

PARAMS_MAGIC = b"FVPM"
PARAMS_VERSION = 1

METRICS_SCHEMA = "round,loss,part_acc,nonpart_acc,kl_mean,timestamp"


class ParamsFormatError(ValueError):
    """Parameter file is malformed or has an unsupported version."""


def save_params(params: FedVIParams, path) -> None:
    arch = params.arch
    arch_json = json.dumps(
        {
            "input_dim": arch.input_dim,
            "embed_widths": list(arch.embed_widths),
            "local_dim": arch.local_dim,
            "global_dim": arch.global_dim,
            "num_classes": arch.num_classes,
            "posterior_widths": list(arch.posterior_widths),
            "support_fraction": arch.support_fraction,
            "mean_damp": arch.mean_damp,
            "logscale_damp": arch.logscale_damp,
            "scale_floor": arch.scale_floor,
            "dropout_rate": arch.dropout_rate,
        },
        sort_keys=True,
    ).encode("utf-8")
    blocks = params.all_blocks()
    parts = [PARAMS_MAGIC, struct.pack("<I", PARAMS_VERSION)]
    parts.append(struct.pack("<I", len(arch_json)))
    parts.append(arch_json)
    parts.append(struct.pack("<I", len(blocks)))
    for b in blocks:
        name = b.name.encode("utf-8")
        arr = b.value.array
        parts.append(struct.pack("<I", len(name)))
        parts.append(name)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(arr.astype("<f8").tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


def load_params(path) -> FedVIParams:
    with open(path, "rb") as fh:
        blob = fh.read()
    pos = 0

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(blob):
            raise ParamsFormatError(f"{path}: parameter file truncated at byte {pos}")
        out = blob[pos : pos + n]
        pos += n
        return out

    if take(4) != PARAMS_MAGIC:
        raise ParamsFormatError(f"{path}: not a parameter file (bad magic)")
    (version,) = struct.unpack("<I", take(4))
    if version != PARAMS_VERSION:
        raise ParamsFormatError(f"{path}: version {version}, expected {PARAMS_VERSION}")
    (arch_len,) = struct.unpack("<I", take(4))
    arch_dict = json.loads(take(arch_len).decode("utf-8"))
    arch = ArchConfig(
        input_dim=arch_dict["input_dim"],
        embed_widths=tuple(arch_dict["embed_widths"]),
        local_dim=arch_dict["local_dim"],
        global_dim=arch_dict["global_dim"],
        num_classes=arch_dict["num_classes"],
        posterior_widths=tuple(arch_dict["posterior_widths"]),
        support_fraction=arch_dict["support_fraction"],
        mean_damp=arch_dict["mean_damp"],
        logscale_damp=arch_dict["logscale_damp"],
        scale_floor=arch_dict["scale_floor"],
        dropout_rate=arch_dict["dropout_rate"],
    )
    (n_blocks,) = struct.unpack("<I", take(4))
    blocks = []
    for _ in range(n_blocks):
        (name_len,) = struct.unpack("<I", take(4))
        name = take(name_len).decode("utf-8")
        (ndim,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{ndim}Q", take(8 * ndim))
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(take(8 * count), dtype="<f8").reshape(shape)
        blocks.append(ParamBlock(name, arr))
    embed = [b for b in blocks if b.name.startswith("embed.")]
    post = [b for b in blocks if b.name.startswith("post.")]
    cls = [b for b in blocks if b.name.startswith("cls.")]
    if len(embed) + len(post) + len(cls) != len(blocks) or len(cls) != 2:
        raise ParamsFormatError(f"{path}: unexpected parameter block names")
    return FedVIParams(embed, post, cls, arch)


def _fmt(value) -> str:
    if value is None:
        return "nan"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_metrics(result: RunResult, cfg: ExperimentConfig, path) -> None:
    """CSV of evaluated rounds behind a '#'-prefixed provenance header."""
    lines = ["# fedvi metrics v1"]
    lines += [f"# {line}" for line in cfg.provenance_lines()]
    lines.append(METRICS_SCHEMA)
    for r in result.reports:
        if r.part_acc is None:
            continue
        lines.append(
            ",".join(
                [
                    str(r.round_index),
                    _fmt(r.mean_client_loss),
                    _fmt(r.part_acc),
                    _fmt(r.nonpart_acc),
                    _fmt(r.kl_mean),
                    str(r.cumulative_steps),
                ]
            )
        )
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_metrics(path) -> list[dict]:
    """Parse a metrics CSV, rejecting any unknown schema."""
    rows = []
    header_seen = False
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if line.startswith("#") or not line.strip():
            continue
        if not header_seen:
            if line != METRICS_SCHEMA:
                raise ValueError(f"{path}: unknown metrics schema {line!r}")
            header_seen = True
            continue
        parts = line.split(",")
        if len(parts) != 6:
            raise ValueError(f"{path}: malformed metrics row {line!r}")
        rows.append(
            {
                "round": int(parts[0]),
                "loss": float(parts[1]),
                "part_acc": float(parts[2]),
                "nonpart_acc": float(parts[3]),
                "kl_mean": float(parts[4]),
                "timestamp": int(parts[5]),
            }
        )
    if not header_seen:
        raise ValueError(f"{path}: missing metrics header")
    return rows


def _dataset_for(cfg: ExperimentConfig) -> tuple[FederatedDataset, SyntheticTask | None]:
    if cfg.gen is not None:
        ds, task = synthetic_task(cfg.gen)
        return ds, task
    ds = load_dataset(cfg.dataset_path)
    d = ds.clients[0].x.shape[1]
    if d != cfg.arch.input_dim or ds.num_classes != cfg.arch.num_classes:
        raise ConfigError(
            f"dataset {cfg.dataset_path} has input_dim={d}, num_classes={ds.num_classes}; "
            f"config says {cfg.arch.input_dim}, {cfg.arch.num_classes}"
        )
    return ds, None


def _out_dir(cfg: ExperimentConfig, out_arg: str | None) -> Path:
    out = Path(out_arg) if out_arg else Path("runs") / cfg.label
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_generate(cfg: ExperimentConfig, out_arg: str | None) -> int:
    if cfg.gen is None:
        raise ConfigError("generate requires data.source = generate")
    out = _out_dir(cfg, out_arg)
    ds, _ = _dataset_for(cfg)
    path = out / "dataset.bin"
    save_dataset(ds, path, cfg.gen)
    sizes = [c.n for c in ds.clients]
    print(
        f"wrote {path}: {len(ds.clients)} clients ({ds.holdout_count} holdout), "
        f"{sum(sizes)} examples, {ds.num_classes} classes"
    )
    return EXIT_OK


def cmd_train(cfg: ExperimentConfig, out_arg: str | None) -> int:
    out = _out_dir(cfg, out_arg)
    ds, _ = _dataset_for(cfg)
    result = run_training(cfg.train, cfg.arch, ds, parallel=cfg.parallel)
    write_metrics(result, cfg, out / "metrics.csv")
    save_params(result.state.params, out / "params.bin")
    summary = {
        "label": cfg.label,
        "seed": cfg.seed,
        "algorithm": cfg.train.algorithm,
        "rounds": cfg.train.rounds,
        "skipped_clients": result.skipped_clients,
        **result.summary,
        "config": cfg.provenance_lines(),
    }
    (out / "summary.json").write_text(
        json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    if result.summary["eval_rounds"] == 0:
        print(f"{cfg.label}: no evaluated rounds (rounds={cfg.train.rounds})")
    else:
        gap = result.summary["gap"]
        print(
            f"{cfg.label}: part_acc={result.summary['part_acc']:.4f} "
            f"nonpart_acc={_fmt(result.summary['nonpart_acc'])} "
            f"gap={_fmt(gap)} over last {result.summary['window']} rounds"
        )
    return EXIT_OK


def _ablation_seed(base_seed: int, index: int) -> int:
    state = np.random.SeedSequence((base_seed, DOMAIN_ABLATION, index)).generate_state(2)
    return int(state[0]) << 32 | int(state[1])


def run_ablation(
    cfg: ExperimentConfig,
    taus: list[float],
    on_row=None,
) -> list[tuple[float, float, float, float]]:
    """One full training run per KL weight over a shared dataset.

    The dataset seed is shared across the sweep; each weight trains under
    its own derived seed. Zero is always included so the participation gap
    has its reference point. Returns (tau, part_acc, nonpart_acc, gap)
    rows sorted by tau; on a failing run the rows completed so far are
    still delivered through ``on_row`` before the error propagates.
    """
    if not taus:
        raise ConfigError("ablation requires a nonempty tau list")
    grid = sorted(set(taus) | {0.0})
    ds, _ = _dataset_for(cfg)
    rows: list[tuple[float, float, float, float]] = []
    for i, tau in enumerate(grid):
        train_cfg = type(cfg.train)(
            **{
                **cfg.train.__dict__,
                "tau": tau,
                "seed": _ablation_seed(cfg.seed, i),
                "algorithm": "fedvi",
            }
        )
        result = run_training(train_cfg, cfg.arch, ds, parallel=cfg.parallel)
        s = result.summary
        row = (tau, s["part_acc"], s["nonpart_acc"], s["gap"])
        rows.append(row)
        if on_row is not None:
            on_row(row)
    return rows


def cmd_ablate(cfg: ExperimentConfig, taus: list[float], out_arg: str | None) -> int:
    out = _out_dir(cfg, out_arg)
    rows: list[tuple[float, float, float, float]] = []
    path = out / "ablation.csv"

    def flush() -> None:
        lines = ["# fedvi ablation v1"]
        lines += [f"# {line}" for line in cfg.provenance_lines()]
        lines.append("tau,part_acc,nonpart_acc,gap")
        for tau, part, nonpart, gap in rows:
            lines.append(f"{_fmt(tau)},{_fmt(part)},{_fmt(nonpart)},{_fmt(gap)}")
        path.write_text("\n".join(lines) + "\n", encoding="utf-8")

    def on_row(row) -> None:
        rows.append(row)
        print(
            f"tau={row[0]:g}: part={row[1]:.4f} nonpart={_fmt(row[2])} gap={_fmt(row[3])}"
        )

    try:
        run_ablation(cfg, taus, on_row=on_row)
    finally:
        flush()
    print(f"wrote {path}")
    return EXIT_OK


def cmd_eval(cfg: ExperimentConfig, params_path: str, out_arg: str | None) -> int:
    out = _out_dir(cfg, out_arg)
    ds, _ = _dataset_for(cfg)
    params = load_params(params_path)
    part = evaluate(params, ds.participating_clients(), cfg.train)
    report = {
        "params": str(params_path),
        "algorithm": cfg.train.algorithm,
        "part_acc": part.accuracy,
        "part_excluded": part.excluded,
        "config": cfg.provenance_lines(),
    }
    if ds.holdout_count:
        nonpart = evaluate(params, ds.holdout_clients(), cfg.train)
        report["nonpart_acc"] = nonpart.accuracy
        report["nonpart_excluded"] = nonpart.excluded
        report["gap"] = part.accuracy - nonpart.accuracy
    (out / "eval.json").write_text(
        json.dumps(report, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    print(json.dumps({k: v for k, v in report.items() if k != "config"}, sort_keys=True))
    return EXIT_OK


def cmd_bound(cfg: ExperimentConfig, params_path: str, out_arg: str | None, check: bool) -> int:
    if cfg.gen is None:
        raise ConfigError("bound requires data.source = generate (slack needs the generator)")
    out = _out_dir(cfg, out_arg)
    ds, task = _dataset_for(cfg)
    params = load_params(params_path)
    if params.arch.input_dim != cfg.gen.d or params.arch.num_classes != cfg.gen.num_classes:
        raise ConfigError(
            f"params {params_path} were trained for input_dim={params.arch.input_dim}, "
            f"num_classes={params.arch.num_classes}; generator has {cfg.gen.d}, "
            f"{cfg.gen.num_classes}"
        )
    rng = substream(cfg.seed, DOMAIN_BOUND)

    prior = standard_prior(params.arch.beta_dim, params.arch.prior_scale)
    emp = 0.0
    kl_total = 0.0
    for client in ds.clients:
        fwd, _, _, gibbs = bounds_mod.client_posterior_audit(
            params, client.x, client.y, cfg.pac.posterior_samples, rng
        )
        emp += gibbs
        kl_total += kl_diag(fwd.stats.q, prior).item()

    slack_scaled = bounds_mod.estimate_slack(
        task,
        bounds_mod.generator_prior(task),
        cfg.pac.eta,
        cfg.pac.delta,
        cfg.pac.slack_samples,
        cfg.pac.slack_samples,
        rng,
    )
    slack_moment = slack_scaled - math.log(1.0 / cfg.pac.delta)
    rhs = bounds_mod.pacbayes_rhs(emp, kl_total, cfg.pac.eta, cfg.pac.delta, slack_moment)
    report = {
        "empirical_risk": emp,
        "kl_local": kl_total,
        "kl_global": 0.0,
        "slack_moment": slack_moment,
        "slack_delta_scaled": slack_scaled,
        "eta": cfg.pac.eta,
        "delta": cfg.pac.delta,
        "rhs": rhs,
    }
    if check:
        res = bounds_mod.bound_holds_check(
            task, params, cfg.pac, cfg.bound_trials, rng, slack=slack_scaled
        )
        report["holds_fraction"] = res.holding_fraction
        report["trials"] = res.trials

    lines = ["# fedvi bound v1"]
    lines += [f"# {line}" for line in cfg.provenance_lines()]
    keys = list(report)
    lines.append(",".join(keys))
    lines.append(",".join(_fmt(report[k]) for k in keys))
    (out / "bound.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    report["config"] = cfg.provenance_lines()
    (out / "bound.json").write_text(
        json.dumps(report, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    print(
        f"empirical={emp:.4f} kl={kl_total:.4f} (global contribution 0: point-estimate "
        f"global posterior) slack={slack_scaled:.4f} rhs={rhs:.4f}"
        + (f" holds={report['holds_fraction']:.2f}" if check else "")
    )
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fedvi", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser) -> None:
        p.add_argument("--config", required=True, help="experiment config file")
        p.add_argument("--out", default=None, help="output directory")
        p.add_argument("--seed", type=int, default=None, help="override run seed")
        p.add_argument("--algorithm", choices=["fedvi", "fedavg"], default=None)
        p.add_argument("--tau", type=float, default=None, help="override KL weight")

    common(sub.add_parser("generate", help="write a synthetic dataset"))
    common(sub.add_parser("train", help="run federated training"))
    p_ablate = sub.add_parser("ablate", help="sweep the KL weight")
    common(p_ablate)
    p_ablate.add_argument(
        "--taus", default="0,1e-6,1e-4,1e-2,1", help="comma-separated KL weights"
    )
    p_eval = sub.add_parser("eval", help="evaluate saved parameters")
    common(p_eval)
    p_eval.add_argument("--params", required=True)
    p_bound = sub.add_parser("bound", help="evaluate the generalization bound")
    common(p_bound)
    p_bound.add_argument("--params", required=True)
    p_bound.add_argument("--check", action="store_true", help="run the holds-fraction trials")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = parse_config(
            args.config,
            seed_override=args.seed,
            algorithm_override=args.algorithm,
            tau_override=args.tau,
        )
        if args.command == "generate":
            return cmd_generate(cfg, args.out)
        if args.command == "train":
            return cmd_train(cfg, args.out)
        if args.command == "ablate":
            taus = [float(t) for t in args.taus.split(",") if t.strip()]
            return cmd_ablate(cfg, taus, args.out)
        if args.command == "eval":
            return cmd_eval(cfg, args.params, args.out)
        if args.command == "bound":
            return cmd_bound(cfg, args.params, args.out, args.check)
        raise ConfigError(f"unknown command {args.command!r}")
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (MalformedDatasetError, DatasetVersionError, ParamsFormatError, OSError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (NonFiniteError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
