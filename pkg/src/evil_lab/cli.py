"""``evil-lab`` command line.

Exit codes: 0 success, 1 config error, 2 runtime error, 3 acceptance failure.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import math
import os
import sys
from concurrent.futures import ProcessPoolExecutor

import numpy as np

from . import config as C
from .envdata import gen_colored_digits, split_environments
from .errors import AcceptanceError, ConfigError
from .metrics import lanczos_spectrum
from .plotting import PlotSpec, emit_svg
from .prop_oracle import sweep_and_compare
from .trainer import (config_hash, final_sharpness, gradient_variance_of, inv_loss_grad, run_variant,
                      save_checkpoint)

METRICS_SCHEMA = 1
EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME, EXIT_ACCEPTANCE = 0, 1, 2, 3


# ------------------------------------------------------------ output helpers


class Output:
    """Writes every artifact under one directory."""

    def __init__(self, root: str):
        self.root = os.path.abspath(root)
        os.makedirs(self.root, exist_ok=True)

    def path(self, name: str) -> str:
        p = os.path.abspath(os.path.join(self.root, name))
        if os.path.commonpath([p, self.root]) != self.root:
            raise ConfigError(f"artifact {name!r} would escape the output directory")
        return p

    def text(self, name: str, content: str) -> str:
        p = self.path(name)
        with open(p, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(content)
        return p

    def json(self, name: str, obj) -> str:
        return self.text(name, json.dumps(_clean(obj), indent=2, sort_keys=True) + "\n")


def _clean(obj):
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else None
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        v = float(v)
        return "nan" if math.isnan(v) else repr(v)
    return str(v)


def csv_text(header: list, rows: list, comment: str) -> str:
    buf = io.StringIO()
    buf.write(f"# {comment}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([_fmt(r.get(h, "")) for h in header])
    return buf.getvalue()


def metrics_rows(result, run_id: str) -> tuple[list, list]:
    n_env = len(result.rows[0]["env_losses"]) if result.rows else 0
    header = (["run_id", "seed", "variant", "iteration", "train_loss"] + [f"env_loss_{i}" for i in range(n_env)]
              + ["var_loss", "train_acc", "ood_acc", "v_inv", "v_var", "sharpness", "exchange_k", "kept"])
    rows = []
    for r in result.rows:
        row = {"run_id": run_id, "seed": result.config.seed, "variant": result.config.variant, **r}
        for i, v in enumerate(r["env_losses"]):
            row[f"env_loss_{i}"] = v
        rows.append(row)
    return header, rows


# ------------------------------------------------------------ experiments


def threads() -> int:
    raw = os.environ.get("EVIL_LAB_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"EVIL_LAB_THREADS must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError(f"EVIL_LAB_THREADS must be a positive integer, got {n}")
    return n


def load_split(cfg: C.ExperimentConfig):
    envs = gen_colored_digits(C.to_data_spec(cfg))
    holdout = cfg.data.holdout % len(envs)
    return split_environments(envs, holdout)


def _spectrum(result, envs, cfg: C.ExperimentConfig):
    """Top Ritz values of the training-loss Hessian over the trainable theta coordinates."""
    state = result.state
    k = cfg.metrics.spectrum_samples
    xs = [e.inputs[:k] for e in envs]
    ys = [e.labels[:k] for e in envs]
    keep = state.keep()
    erm = C.ObjectiveConfig("erm")

    def grad_fn(theta):
        _, g = inv_loss_grad(state, erm, xs, ys, params={**state.params, "theta": theta}, keep=keep)
        return g["theta"] if keep is None else g["theta"] * keep

    return lanczos_spectrum(grad_fn, state.params["theta"], cfg.metrics.spectrum_k,
                            cfg.metrics.lanczos_iterations, seed=cfg.seed)


def final_report(result, split, cfg: C.ExperimentConfig) -> dict:
    tc = result.config
    report = {
        "variant": tc.variant,
        "seed": tc.seed,
        "config_hash": config_hash(tc),
        "train_acc": result.train_acc,
        "ood_acc": result.ood_acc,
        "exchanges": len(result.exchanges),
        "kept": result.state.mask.kept if result.state.mask is not None else None,
    }
    m = cfg.metrics
    if m.gradient_variance and len(split.train) > 1:
        rep = gradient_variance_of(result.state, split.train)
        report["v_inv"], report["v_var"] = rep.v_inv, rep.v_var
    if m.sharpness:
        masked = result.state.mask is not None and (tc.sam is None or tc.sam.masked)
        report["sharpness"] = final_sharpness(result.state, split.train, m.sharpness_rho, masked).sharpness
    if m.spectrum:
        spec = _spectrum(result, split.train, cfg)
        report["eigenvalues"] = list(spec.eigenvalues)
        report["lambda_1"] = spec.top
        report["lambda_ratio"] = spec.ratio
        report["lanczos_breakdown"] = spec.breakdown
    return report


def _train_like(cfg: C.ExperimentConfig, out: Output, diagnostics: bool) -> int:
    """Shared body of ``train`` and ``metrics``; the latter forces per-row diagnostics."""
    split = load_split(cfg)
    changes = {}
    if diagnostics and cfg.metrics.diagnostics_every == 0:
        changes["diagnostics_every"] = cfg.train.log_every
    tc = C.to_train_config(cfg, **changes)
    result = run_variant(tc, split.train, split.test)
    run_id = f"{tc.variant}-s{tc.seed}-{config_hash(tc)[:8]}"
    header, rows = metrics_rows(result, run_id)
    out.text("metrics.csv", csv_text(header, rows, f"evil-lab metrics schema={METRICS_SCHEMA}"))
    emit_svg(out.path("metrics.csv"), PlotSpec("iteration", ("train_acc", "ood_acc"), f"accuracy ({tc.variant})",
                                               "iteration", "accuracy"), out.path("accuracy.svg"))
    emit_svg(out.path("metrics.csv"), PlotSpec("iteration", ("train_loss",), f"training loss ({tc.variant})",
                                               "iteration", "loss"), out.path("loss.svg"))
    if tc.diagnostics_every:
        emit_svg(out.path("metrics.csv"),
                 PlotSpec("iteration", ("v_inv", "v_var"), "gradient variance across domains", "iteration",
                          "variance", labels={"v_inv": "theta_inv", "v_var": "theta_var"}),
                 out.path("gradient_variance.svg"))
        if tc.sam is not None:
            emit_svg(out.path("metrics.csv"), PlotSpec("iteration", ("sharpness",), "sharpness", "iteration",
                                                       "sharpness"), out.path("sharpness.svg"))
    out.json("report.json", final_report(result, split, cfg))
    save_checkpoint(out.path("checkpoint.evck"), result.state, tc, {"ood_acc": result.ood_acc})
    return EXIT_OK


def cmd_train(cfg, out: Output) -> int:
    return _train_like(cfg, out, diagnostics=False)


def cmd_metrics(cfg, out: Output) -> int:
    return _train_like(cfg, out, diagnostics=True)


def cmd_oracle(cfg, out: Output) -> int:
    rows, violations, direction = [], [], []
    header = None
    for pc in C.to_oracle_configs(cfg):
        table = sweep_and_compare(pc, check=False)
        text = table.to_csv()
        lines = text.splitlines()
        header = lines[0]
        rows.extend(lines[1:])
        violations += [f"{r.strategy}@p={r.p_e:g},M_var={r.m_var}" for r in table.violations()]
        direction += [f"p={p:g},M_var={pc.m_var}" for p in table.direction_failures()]
    out.text("oracle.csv", f"# evil-lab oracle schema={METRICS_SCHEMA}\n" + "\n".join([header] + rows) + "\n")
    emit_svg(out.path("oracle.csv"), PlotSpec("p_e", ("error",), "variant-block error by strategy", "p_e",
                                              "error", group_by="strategy"), out.path("oracle_error.svg"))
    emit_svg(out.path("oracle.csv"), PlotSpec("p_e", ("inv_rate", "var_rate"), "kept rates by strategy", "p_e",
                                              "P[m=1]", group_by="strategy"), out.path("oracle_rates.svg"))
    out.json("report.json", {"bound_violations": violations, "direction_failures": direction})
    if violations:
        raise AcceptanceError(f"{len(violations)} bound violation(s): {', '.join(violations)}")
    return EXIT_OK


def _sweep_cell(args):
    cfg_json, alpha, delta_t, cell_seed = args
    cfg = C.parse_config_text(cfg_json)
    split = load_split(cfg)
    tc = C.to_train_config(cfg, alpha=alpha, delta_t=delta_t, seed=cell_seed, variant="evil")
    result = run_variant(tc, split.train, split.test)
    return {"alpha": alpha, "delta_t": delta_t, "seed": cell_seed, "train_acc": result.train_acc,
            "ood_acc": result.ood_acc}


def cmd_sweep(cfg, out: Output) -> int:
    cells = [(a, d) for a in cfg.sweep.alphas for d in cfg.sweep.delta_ts]
    seeds = np.random.SeedSequence(cfg.seed).generate_state(len(cells))
    text = C.dump_config(cfg)
    jobs = [(text, a, d, int(s) % (2 ** 31)) for (a, d), s in zip(cells, seeds)]
    n = min(threads(), len(jobs))
    if n > 1:
        with ProcessPoolExecutor(max_workers=n) as pool:
            rows = list(pool.map(_sweep_cell, jobs))
    else:
        rows = [_sweep_cell(j) for j in jobs]
    for i, r in enumerate(rows):
        r["cell"] = i
    header = ["cell", "alpha", "delta_t", "seed", "train_acc", "ood_acc"]
    out.text("sweep.csv", csv_text(header, rows, f"evil-lab sweep schema={METRICS_SCHEMA}"))
    emit_svg(out.path("sweep.csv"), PlotSpec("delta_t", ("ood_acc",), "OOD accuracy over mask-update period",
                                             "delta_t", "OOD accuracy", group_by="alpha"), out.path("sweep.svg"))
    out.json("report.json", {"cells": rows})
    return EXIT_OK


COMMANDS = {"train": cmd_train, "oracle": cmd_oracle, "sweep": cmd_sweep, "metrics": cmd_metrics}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="evil-lab", description="Sparse invariant-learning experiments.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("train", "oracle", "sweep", "metrics", "defaults"):
        p = sub.add_parser(name)
        p.add_argument("--config", default=None, help="JSON config path, or - for stdin (default: built-in defaults)")
        p.add_argument("--out", default=None, required=name != "defaults", help="output directory")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--variant", default=None, choices=("evil", "evil_sam", "dense_baseline", "rigl_ablation"))
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "defaults":
            text = C.defaults_json()
            sys.stdout.write(text)
            if args.out:
                Output(args.out).text("defaults.json", text)
            return EXIT_OK
        cfg = C.with_overrides(C.parse_config(args.config), args.seed, args.variant)
        out = Output(args.out)
        out.text("config.json", C.dump_config(cfg))
        return COMMANDS[args.command](cfg, out)
    except ConfigError as exc:
        print(f"evil-lab: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except AcceptanceError as exc:
        print(f"evil-lab: acceptance failure: {exc}", file=sys.stderr)
        return EXIT_ACCEPTANCE
    except Exception as exc:  # noqa: BLE001 - every other failure is a runtime error
        print(f"evil-lab: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
