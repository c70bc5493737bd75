"""Command-line front end for the pruning laboratory.

Subcommands: score, prune, distill, report, verify, sweep. A JSON config file
provides defaults; flags win over the file. Every command validates its
configuration before touching the output directory, and all artifacts are
deterministic under a fixed seed (byte-identical across reruns).

Exit codes: 0 ok, 1 validation error, 2 check failure, 3 numeric divergence.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import analyze, budget, factorize, recover, scoring, toymodel, verify

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_CHECK_FAILURE = 2
EXIT_DIVERGENCE = 3

CLI_METHODS = ("baseline", "svd", "palu", "rap")
SCORING_MODES = ("fisher", "magnitude")
BUDGET_MODES = ("adaptive", "uniform")


class ValidationFailure(ValueError):
    pass


@dataclass
class RunConfig:
    method: str = "rap"
    rho: float = 0.3
    scoring: str = "fisher"
    budget: str = "adaptive"
    seed: int = 42
    out: str = "runs/out"
    model_path: str | None = None
    model_spec: dict | None = None
    calibration: dict = field(default_factory=lambda: {"count": 16, "window": 64})
    kd: dict = field(default_factory=dict)
    kd_enabled: bool = True
    ratios: tuple = (0.1, 0.2, 0.3, 0.4, 0.5)
    seq_len: int = 64

    @classmethod
    def load(cls, args: argparse.Namespace) -> "RunConfig":
        cfg = cls()
        if args.config:
            path = Path(args.config)
            if not path.exists():
                raise ValidationFailure(f"config file not found: {path}")
            data = json.loads(path.read_text())
            model = data.get("model", {})
            cfg.model_path = model.get("path")
            cfg.model_spec = model.get("spec")
            kd = dict(data.get("kd", {}))
            cfg.kd_enabled = bool(kd.pop("enabled", True))
            cfg.kd = kd
            for key in ("method", "rho", "scoring", "budget", "seed", "out",
                        "seq_len"):
                if key in data:
                    setattr(cfg, key, data[key])
            if "calibration" in data:
                cfg.calibration = dict(data["calibration"])
            if "ratios" in data:
                cfg.ratios = tuple(data["ratios"])
        for key in ("method", "rho", "scoring", "budget", "seed", "out"):
            value = getattr(args, key, None)
            if value is not None:
                setattr(cfg, key, value)
        cfg.validate()
        return cfg

    def validate(self):
        if self.method not in CLI_METHODS:
            raise ValidationFailure(f"method must be one of {CLI_METHODS}")
        if not 0.0 <= self.rho < 1.0:
            raise ValidationFailure("rho must be in [0, 1)")
        if self.scoring not in SCORING_MODES:
            raise ValidationFailure(f"scoring must be one of {SCORING_MODES}")
        if self.budget not in BUDGET_MODES:
            raise ValidationFailure(f"budget must be one of {BUDGET_MODES}")
        if self.model_path and not Path(self.model_path).exists():
            raise ValidationFailure(f"model file not found: {self.model_path}")
        if any(not 0.0 < r <= 1.0 for r in self.ratios):
            raise ValidationFailure("sweep ratios must be in (0, 1]")
        if self.seq_len < 2:
            raise ValidationFailure("seq_len must be at least 2")
        try:
            self.kd_config()
        except ValueError as exc:
            raise ValidationFailure(f"bad kd settings: {exc}") from exc

    @property
    def internal_method(self) -> str:
        return "rap-hybrid" if self.method == "rap" else self.method

    def build_model(self) -> toymodel.AttentionModel:
        if self.model_path:
            return toymodel.load_model(self.model_path)
        if self.model_spec:
            return toymodel.AttentionModel.build(
                toymodel.spec_from_json(self.model_spec))
        return toymodel.AttentionModel.build(toymodel.default_spec(seed=self.seed))

    def build_calibration(self, vocab: int) -> toymodel.CalibrationSet:
        return toymodel.markov_calibration(
            vocab,
            count=int(self.calibration.get("count", 16)),
            window=int(self.calibration.get("window", 64)),
            seed=int(self.calibration.get("seed", self.seed)),
        )

    def kd_config(self) -> recover.KdConfig:
        return recover.KdConfig(seed=self.seed, **self.kd)

    def out_dir(self) -> Path:
        path = Path(self.out)
        path.mkdir(parents=True, exist_ok=True)
        return path


def _compute_scores(cfg: RunConfig, model) -> scoring.PairScoreTable:
    scheme = model.spec.rope.scheme
    if cfg.scoring == "magnitude":
        return scoring.magnitude_scores(model, scheme)
    calib = cfg.build_calibration(model.spec.vocab)
    return scoring.pair_scores(scoring.estimate_fisher(model, calib), scheme)


def _load_scores(path: Path) -> scoring.PairScoreTable:
    return scoring.PairScoreTable.from_json(path.read_text())


def _score_summary(table: scoring.PairScoreTable) -> dict:
    return {
        "grand_total": table.grand_total(),
        "group_totals": {f"{l}.{s}": table.group_total(l, s)
                         for l, s in table.groups()},
        "argsort": {f"{l}.{s}.{h}": np.argsort(-table.get(l, s, h),
                                               kind="stable").tolist()
                    for l, s, h in table.keys()},
    }


def cmd_score(cfg: RunConfig) -> int:
    model = cfg.build_model()
    table = _compute_scores(cfg, model)
    out = cfg.out_dir()
    (out / "scores.json").write_text(table.to_json())
    summary = {"scoring": cfg.scoring, "seed": cfg.seed}
    summary.update(_score_summary(table))
    (out / "score_summary.json").write_text(
        json.dumps(summary, sort_keys=True, indent=1))
    print(f"wrote {out / 'scores.json'}")
    return EXIT_OK


def _build_plan(cfg: RunConfig, model, table) -> budget.BudgetPlan:
    if cfg.budget == "uniform":
        return budget.uniform_plan(table.num_pairs, model.spec.layers, cfg.rho)
    return budget.allocate(table, cfg.rho, budget.ADAPTIVE)


def cmd_prune(cfg: RunConfig, scores_path: str | None = None,
              plan_path: str | None = None) -> int:
    model = cfg.build_model()
    table = (_load_scores(Path(scores_path)) if scores_path
             else _compute_scores(cfg, model))
    try:
        if plan_path:
            plan = budget.BudgetPlan.from_json(Path(plan_path).read_text())
        else:
            plan = _build_plan(cfg, model, table)
    except budget.InfeasibleBudget as exc:
        print(f"error: infeasible budget: {exc}", file=sys.stderr)
        return EXIT_CHECK_FAILURE
    compressed = factorize.build_compressed(model, cfg.internal_method, cfg.rho,
                                            scores=table, plan=plan)
    out = cfg.out_dir()
    toymodel.save_model(compressed, out / "compressed.model")
    (out / "budget.json").write_text(plan.to_json())
    (out / "manifest.json").write_text(
        json.dumps(compressed.manifest, sort_keys=True, indent=1))
    print(f"wrote {out / 'compressed.model'}")
    return EXIT_OK


def cmd_distill(cfg: RunConfig) -> int:
    out = cfg.out_dir()
    teacher = cfg.build_model()
    checkpoint = out / "compressed.model"
    if checkpoint.exists():
        student = toymodel.load_model(checkpoint)
    else:
        table = _compute_scores(cfg, teacher)
        plan = _build_plan(cfg, teacher, table)
        student = factorize.build_compressed(teacher, cfg.internal_method,
                                             cfg.rho, scores=table, plan=plan)
    calib = cfg.build_calibration(teacher.spec.vocab)
    kd_cfg = cfg.kd_config()
    if not cfg.kd_enabled or kd_cfg.steps == 0:
        merged = student
        trace = []
        adapters_json = "{}"
    else:
        try:
            trained, trace = recover.distill(teacher, student, calib, kd_cfg)
        except recover.DistillationDiverged as exc:
            (out / "kd_trace.csv").write_text(recover.trace_to_csv(exc.trace))
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_DIVERGENCE
        adapters_json = recover.adapters_to_json(trained)
        merged = recover.merge_adapters(trained)
    toymodel.save_model(merged, out / "recovered.model")
    (out / "adapters.json").write_text(adapters_json)
    (out / "kd_trace.csv").write_text(recover.trace_to_csv(trace))
    print(f"wrote {out / 'recovered.model'}")
    return EXIT_OK


def _sweep_reports(cfg: RunConfig, model, methods) -> list:
    table = None
    if "rap" in methods:
        table = _compute_scores(cfg, model)
    tokens = list(toymodel.markov_calibration(
        model.spec.vocab, count=1, window=cfg.seq_len, seed=cfg.seed).sequences[0])
    return analyze.sweep(model, methods, cfg.ratios, tokens, scores=table,
                         budget_mode=cfg.budget)


def cmd_report(cfg: RunConfig) -> int:
    model = cfg.build_model()
    reports = _sweep_reports(cfg, model, [cfg.method])
    out = cfg.out_dir()
    (out / "report.csv").write_text(analyze.reports_to_csv(reports))
    (out / "report.json").write_text(analyze.reports_to_json(reports))
    print(f"wrote {out / 'report.csv'}")
    return EXIT_OK


def cmd_sweep(cfg: RunConfig) -> int:
    model = cfg.build_model()
    reports = _sweep_reports(cfg, model, list(CLI_METHODS))
    out = cfg.out_dir()
    (out / "sweep.csv").write_text(analyze.reports_to_csv(reports))
    (out / "sweep.json").write_text(analyze.reports_to_json(reports))
    print(f"wrote {out / 'sweep.csv'}")
    return EXIT_OK


def cmd_verify(cfg: RunConfig) -> int:
    model = cfg.build_model()
    table = _compute_scores(cfg, model)
    plan = _build_plan(cfg, model, table)
    compressed = factorize.build_compressed(model, "rap-hybrid",
                                            cfg.rho if cfg.rho > 0 else 0.3,
                                            scores=table, plan=plan)
    calib = cfg.build_calibration(model.spec.vocab)
    rng = np.random.default_rng(cfg.seed)

    checks: dict[str, dict] = {}
    dev = verify.check_commutativity(compressed, trials=8, seed=cfg.seed)
    checks["commutativity"] = {"deviation": dev, "passed": dev <= 1e-12}

    worst_greedy = True
    for _ in range(25):
        sigma = rng.random(model.spec.head_dim // 2)
        ok, _witness = verify.check_greedy_optimality(sigma, int(rng.integers(
            1, model.spec.head_dim // 2 + 1)))
        worst_greedy = worst_greedy and ok
    checks["greedy_optimality"] = {"passed": worst_greedy}

    quad = verify.quadratic_bound_case(cfg.seed)
    checks["quadratic_bound"] = {"ratio": quad.ratio,
                                 "passed": abs(quad.ratio - 1.0) <= 1e-9}

    ref = factorize.reconstructed_reference(model, "rap-hybrid", cfg.rho or 0.3,
                                            scores=table, plan=plan)
    tokens = list(calib.sequences[0][:16])
    lat = toymodel.forward_prefill(compressed, tokens).logits
    full = toymodel.forward_prefill(ref, tokens).logits
    gap = float(np.max(np.abs(lat - full)))
    checks["latent_equivalence"] = {"deviation": gap, "passed": gap <= 1e-9}

    passed = all(c["passed"] for c in checks.values())
    payload = {"passed": passed, "checks": checks, "seed": cfg.seed}
    out = cfg.out_dir()
    (out / "verify.json").write_text(json.dumps(payload, sort_keys=True, indent=1))
    for name, result in sorted(checks.items()):
        print(f"{'PASS' if result['passed'] else 'FAIL'} {name}")
    return EXIT_OK if passed else EXIT_CHECK_FAILURE


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="rapkit",
        description="Pair-aligned KV-cache pruning laboratory")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, helptext in (
        ("score", "compute pair importance scores"),
        ("prune", "allocate budgets and build a compressed checkpoint"),
        ("distill", "recover accuracy with adapter distillation"),
        ("report", "resource report for the configured method"),
        ("verify", "structural checks on a freshly pruned model"),
        ("sweep", "resource reports for every method and ratio"),
    ):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--rho", type=float, help="KV-cache compression ratio")
        p.add_argument("--method", choices=CLI_METHODS)
        p.add_argument("--scoring", choices=SCORING_MODES)
        p.add_argument("--budget", choices=BUDGET_MODES)
        p.add_argument("--seed", type=int)
        p.add_argument("--out", help="output directory")
        if name == "prune":
            p.add_argument("--scores", help="scores JSON from the score command")
            p.add_argument("--plan", help="budget plan JSON to apply as-is")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = RunConfig.load(args)
    except (ValidationFailure, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    try:
        if args.command == "score":
            return cmd_score(cfg)
        if args.command == "prune":
            return cmd_prune(cfg, scores_path=getattr(args, "scores", None),
                             plan_path=getattr(args, "plan", None))
        if args.command == "distill":
            return cmd_distill(cfg)
        if args.command == "report":
            return cmd_report(cfg)
        if args.command == "sweep":
            return cmd_sweep(cfg)
        if args.command == "verify":
            return cmd_verify(cfg)
    except (ValidationFailure, OSError, json.JSONDecodeError, KeyError,
            ValueError) as exc:
        # malformed or missing input artifacts are configuration errors
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except FloatingPointError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGENCE
    raise AssertionError(f"unhandled command {args.command}")


if __name__ == "__main__":
    sys.exit(main())
