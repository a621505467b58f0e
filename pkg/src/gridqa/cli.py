"""``gridqa`` command line: gen-data, train, calibrate, eval, compare, sweep, render.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from . import tensor_nn as nn
from .calibration import CalibrationConfig, PlacementError, calibrate_env
from .config import ConfigError, RunConfig, dump_run_config, load_run_config
from .dataset_gen import GenerationError, build_dataset
from .e2e_trainer import joint_train
from .eval_harness import (
    ExperimentConfig,
    OracleAgent,
    PolicyAgent,
    StillAgent,
    compare_settings,
    curve_table,
    evaluate,
    format_comparison,
    format_deltas,
    spawn_jobs,
    sweep_lambda,
    sweep_markers,
)
from .nav_policy import NavConfig, NavModel, init_nav_model, train_navigation
from .qa_model import BlindfoldModel, QAConfig, QAModel, init_qa_model, train_blindfold, train_qa
from .render import render_ascii, render_svg
from .storage import (
    FormatError,
    atomic_write,
    dumps,
    env_to_dict,
    expect_kind,
    load_dataset,
    load_model,
    save_dataset,
    save_model,
    save_report,
    write_csv,
)


class UsageError(Exception):
    pass


class Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: {message}")


def _floats(text: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _ints(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _say(msg: str) -> None:
    print(msg, file=sys.stderr, flush=True)


def _config(args) -> RunConfig:
    overrides = list(args.set or [])
    if getattr(args, "jobs", None) is not None:
        overrides.append(f"jobs={args.jobs}")
    return load_run_config(args.config, overrides)


def _snapshot(path: Path, cfg: RunConfig, extra: dict | None = None) -> None:
    text = dump_run_config(cfg)
    if extra:
        text += "# command\n" + "".join(f"# {k}: {v}\n" for k, v in sorted(extra.items()))
    atomic_write(path, text)


def _sibling(path: Path, tag: str) -> Path:
    return path.with_name(f"{path.stem}.{tag}{path.suffix or '.ckpt'}")


def _load(path, kind):
    model = load_model(path)
    expect_kind(model, kind, path)
    return model


# ---------------------------------------------------------------- commands

def cmd_gen_data(args) -> int:
    cfg = _config(args)
    out = Path(args.out)
    ds = build_dataset(cfg.data, jobs=cfg.jobs)
    save_dataset(out, ds, dump_run_config(cfg))
    n = sum(len(ds.split(s)) for s in ("train", "val", "test"))
    _say(f"wrote {n} environments, {sum(len(ds.questions(s)) for s in ('train', 'val', 'test'))} questions to {out}")
    return 0


def cmd_train(args) -> int:
    cfg = _config(args)
    ds = load_dataset(args.data)
    out = Path(args.out)
    feat = ds.train[0][0].feature_dim
    log = _say if args.verbose else None
    model = None
    try:
        if args.mode == "nav":
            model = init_nav_model(NavConfig(len(ds.word_vocab), feat), ds.word_vocab, cfg.nav.seed)
            model, curve = train_navigation(ds, cfg.nav, model=model, log=log)
            save_model(out, model)
            write_csv(out.with_suffix(".curve.csv"), ["epoch", "loss", "accuracy"], curve)
        elif args.mode == "qa":
            model = init_qa_model(QAConfig(len(ds.word_vocab), feat, len(ds.answer_vocab)), ds.word_vocab,
                                  ds.answer_vocab, cfg.qa.seed)
            model, curve = train_qa(ds, cfg.qa, model=model, log=log)
            save_model(out, model)
            write_csv(out.with_suffix(".curve.csv"), ["epoch", "loss", "accuracy"], curve)
        elif args.mode == "blindfold":
            model = train_blindfold(ds, cfg.qa)
            save_model(out, model)
        else:
            nav = init_nav_model(NavConfig(len(ds.word_vocab), feat), ds.word_vocab, cfg.joint.seed)
            qa = init_qa_model(QAConfig(len(ds.word_vocab), feat, len(ds.answer_vocab)), ds.word_vocab,
                               ds.answer_vocab, cfg.joint.seed)
            model = nav
            nav, qa, jlog = joint_train(ds, cfg.joint, nav=nav, qa=qa, log=log)
            save_model(_sibling(out, "nav"), nav)
            save_model(_sibling(out, "qa"), qa)
            jlog.to_csv(out.with_suffix(".curve.csv"))
    except nn.NumericError as exc:
        dump = out.with_suffix(".failed.ckpt")
        if model is not None:
            save_model(dump, model)
        _say(f"error: {exc}; state dumped to {dump}")
        return 2
    _snapshot(out.with_suffix(".config.yaml"), cfg, {"mode": args.mode, "data": args.data})
    _say(f"wrote {out if args.mode != 'e2e' else _sibling(out, 'nav')}")
    return 0


def cmd_calibrate(args) -> int:
    overrides = list(args.set or [])
    for key, val in (("lam", args.lam), ("n_markers", args.markers)):
        if val is not None:
            overrides.append(f"calibration.{key}={val}")
    args.set = overrides
    cfg = _config(args)
    calib = cfg.calibration
    nav = _load(args.ckpt, NavModel)
    ds = load_dataset(args.data)
    out = Path(args.out)
    failures = 0
    envs = ds.split(args.split)
    for env, _ in envs:
        try:
            model, marked, _ = calibrate_env(nav, env, calib, args.method)
        except PlacementError as exc:
            failures += 1
            _say(f"warning: {env.env_id}: {exc}")
            continue
        stem = calibrated_stem(env.env_id, calib.lam if args.method == "distill" else 0.0, calib.n_markers, calib.seed)
        save_model(out / f"{stem}.ckpt", model)
        atomic_write(out / f"{stem}.markers.json", dumps(env_to_dict(marked)))
        _say(f"calibrated {env.env_id}")
    _snapshot(out / "config.yaml", cfg, {"method": args.method, "ckpt": args.ckpt, "split": args.split})
    return 2 if failures == len(envs) else 0


def calibrated_stem(env_id: str, lam: float, n_markers: int, seed: int) -> str:
    return f"{env_id}.lam{lam:g}.m{n_markers}.s{seed}"


def _calibrated_models(directory, env_ids):
    """One adapted checkpoint per environment; a directory must hold a single setting."""
    models = {}
    for env_id in env_ids:
        found = sorted(Path(directory).glob(f"{env_id}.lam*.ckpt"))
        if not found:
            raise FileNotFoundError(f"missing calibrated checkpoint for {env_id} in {directory}")
        if len(found) > 1:
            raise UsageError(f"{directory} holds several calibrated checkpoints for {env_id}; use one directory "
                             f"per setting")
        models[env_id] = _load(found[0], NavModel)
    return models


def _agent(args, ds, split):
    qa = _load(args.qa, QAModel) if getattr(args, "qa", None) else None
    if args.agent == "still":
        return StillAgent(_load(args.blindfold, BlindfoldModel) if args.blindfold else None)
    if args.agent == "oracle":
        return OracleAgent(qa)
    if args.calibrated:
        return PolicyAgent(_calibrated_models(args.calibrated, [e.env_id for e, _ in ds.split(split)]), qa)
    if not args.nav:
        raise UsageError("eval: --nav or --calibrated is required for the policy agent")
    return PolicyAgent(_load(args.nav, NavModel), qa)


def cmd_eval(args) -> int:
    if args.tiers is not None:
        args.set = list(args.set or []) + [f"eval.tiers=[{','.join(map(str, args.tiers))}]"]
    cfg = _config(args)
    ds = load_dataset(args.data)
    split = args.split or cfg.eval.split
    agent = _agent(args, ds, split)
    report = evaluate(agent, ds.questions(split), cfg.eval.tiers, args.seed, n_jobs=cfg.jobs)
    out = Path(args.out)
    save_report(out, report)
    _snapshot(out / "config.yaml", cfg, {"agent": args.agent, "split": split, "seed": args.seed})
    for t in report.tiers.values():
        print(f"T-{t.k}: n={t.n} skipped={t.skipped} d_delta={t.mean_d_delta:.3f} cells "
              f"({t.mean_d_delta_m:.3f} m) qa={t.qa_accuracy:.3f} stop={t.stop_rate:.3f} len={t.mean_length:.1f}")
    return 0


def _pretrained(args, cfg, seeds):
    """{seed: (nav, qa)} from ``--nav``/``--qa`` lists aligned with seeds, if given."""
    navs = args.nav or []
    qas = args.qa or []
    if navs and len(navs) != len(seeds):
        raise UsageError(f"got {len(navs)} --nav checkpoints for {len(seeds)} seeds")
    if qas and len(qas) != len(navs):
        raise UsageError("--qa must be given once per --nav")
    out = {}
    for i, seed in enumerate(seeds[: len(navs)]):
        out[seed] = (_load(navs[i], NavModel), _load(qas[i], QAModel) if qas else None)
    return out


def _experiment(cfg: RunConfig) -> ExperimentConfig:
    return ExperimentConfig(nav=cfg.nav, calib=cfg.calibration, tiers=cfg.eval.tiers,
                            warm_start=cfg.joint.warm_start, p_max=cfg.joint.sched.p_max)


def cmd_compare(args) -> int:
    cfg = _config(args)
    ds = load_dataset(args.data)
    seeds = list(cfg.eval.seeds)
    res = compare_settings(ds, seeds, _experiment(cfg), _pretrained(args, cfg, seeds), cfg.eval.split, log=_say)
    out = Path(args.out)
    table = format_comparison(res) + "\n\n" + format_deltas(res) + "\n"
    atomic_write(out / "comparison.txt", table)
    rows = []
    for name, row in res["rows"].items():
        for k in res["tiers"]:
            for seed, d, q in zip(res["seeds"], row["d_delta"][k], row["qa"][k]):
                rows.append([name, k, seed, d, q])
    write_csv(out / "comparison.csv", ["setting", "k", "seed", "mean_d_delta", "qa_accuracy"], rows)
    _snapshot(out / "config.yaml", cfg, {"command": "compare"})
    print(table, end="")
    return 0


def cmd_sweep(args) -> int:
    if (args.lambdas is None) == (args.markers is None):
        raise UsageError("sweep: give exactly one of --lambda or --markers")
    cfg = _config(args)
    ds = load_dataset(args.data)
    seeds = list(cfg.eval.seeds)
    exp = _experiment(cfg)
    pre = _pretrained(args, cfg, seeds)
    if args.lambdas is not None:
        for lam in args.lambdas:
            if not 0.0 <= lam <= 1.0:
                raise ConfigError(f"--lambda values must lie in [0, 1], got {lam}")
        res = sweep_lambda(ds, seeds, exp, tuple(args.lambdas), pre, cfg.eval.lambda_split, log=_say)
        name = "lambda"
    else:
        for n in args.markers:
            if n != 0:
                CalibrationConfig(n_markers=n)  # validates the count
        counts = [n for n in args.markers if n != 0]
        res = sweep_markers(ds, seeds, exp, tuple(counts), pre, cfg.eval.split, include_zero=0 in args.markers,
                            log=_say)
        name = "markers"
    out = Path(args.out)
    header, rows = curve_table(res)
    write_csv(out / f"sweep_{name}.csv", header, rows)
    per_seed = [[str(x), k, s, v] for x in res["x"] for k in res["tiers"]
                for s, v in zip(res["seeds"], res["curve"][x][k])]
    write_csv(out / f"sweep_{name}_seeds.csv", [name, "k", "seed", "mean_d_delta"], per_seed)
    _snapshot(out / "config.yaml", cfg, {"command": f"sweep {name}"})
    for r in rows:
        print(f"T-{r[0]}: " + "  ".join(f"{h}={v:.3f}" for h, v in zip(header[1:], r[1:])))
    return 0


def cmd_render(args) -> int:
    ds = load_dataset(args.data)
    found = [(env, q) for s in ("train", "val", "test") for env, q in ds.questions(s) if q.qid == args.qid]
    if not found:
        raise UsageError(f"render: no question {args.qid!r} in {args.data}")
    env, q = found[0]
    navs, labels = [], []
    for path in args.nav or []:
        navs.append(_load(path, NavModel))
        labels.append(Path(path).stem)
    if args.calibrated:
        navs.append(_calibrated_models(args.calibrated, [env.env_id])[env.env_id])
        labels.append("calibrated")
    jobs, _, skipped = spawn_jobs([(env, q)], [args.k], args.seed)
    if not jobs:
        raise RuntimeError(f"cannot spawn {args.k} actions from the target")
    trajs = [PolicyAgent(m).run(jobs)[0] for m in navs] if navs else StillAgent().run(jobs)
    labels = labels or ["still"]
    out = Path(args.out)
    title = f"{q.qid}: {' '.join(q.tokens)} (T-{args.k})"
    atomic_write(out.with_suffix(".txt"), title + "\n" + render_ascii(env, trajs, q.target_object_id))
    atomic_write(out.with_suffix(".svg"), render_svg(env, trajs, q.target_object_id, labels, title=title))
    _say(f"wrote {out.with_suffix('.txt')} and {out.with_suffix('.svg')}")
    return 0


# ---------------------------------------------------------------- parser

def build_parser() -> Parser:
    p = Parser(prog="gridqa", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True, parser_class=Parser)

    def common(sp, data=True):
        sp.add_argument("--config", help="YAML run configuration")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key (repeatable)")
        sp.add_argument("--jobs", type=int, help="worker processes for generation / evaluation")
        if data:
            sp.add_argument("--data", required=True, help="dataset directory")

    g = sub.add_parser("gen-data", help="generate a dataset directory")
    common(g, data=False)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train a model")
    common(t)
    t.add_argument("--mode", choices=("nav", "qa", "e2e", "blindfold"), required=True)
    t.add_argument("--out", required=True, help="checkpoint path (e2e writes <stem>.nav / <stem>.qa)")
    t.add_argument("-v", "--verbose", action="store_true")
    t.set_defaults(func=cmd_train)

    c = sub.add_parser("calibrate", help="adapt a navigation model to each environment of a split")
    common(c)
    c.add_argument("--ckpt", required=True, help="pre-trained navigation checkpoint")
    c.add_argument("--method", choices=("distill", "finetune"), default="distill")
    c.add_argument("--lambda", dest="lam", type=float)
    c.add_argument("--markers", type=int)
    c.add_argument("--split", default="test")
    c.add_argument("--out", required=True, help="directory for per-environment checkpoints")
    c.set_defaults(func=cmd_calibrate)

    e = sub.add_parser("eval", help="evaluate an agent at spawn tiers")
    common(e)
    e.add_argument("--agent", choices=("policy", "still", "oracle"), default="policy")
    e.add_argument("--nav")
    e.add_argument("--calibrated", help="directory written by calibrate")
    e.add_argument("--qa")
    e.add_argument("--blindfold")
    e.add_argument("--tiers", type=_ints)
    e.add_argument("--split")
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_eval)

    m = sub.add_parser("compare", help="standard vs calibration over seeds")
    common(m)
    m.add_argument("--nav", action="append", help="pre-trained checkpoint per seed (else trained here)")
    m.add_argument("--qa", action="append")
    m.add_argument("--out", required=True)
    m.set_defaults(func=cmd_compare)

    s = sub.add_parser("sweep", help="lambda or marker-count sweep")
    common(s)
    s.add_argument("--lambda", dest="lambdas", type=_floats)
    s.add_argument("--markers", type=_ints)
    s.add_argument("--nav", action="append")
    s.add_argument("--qa", action="append")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_sweep)

    r = sub.add_parser("render", help="ASCII + SVG map of one episode")
    r.add_argument("--data", required=True)
    r.add_argument("--qid", required=True)
    r.add_argument("--nav", action="append")
    r.add_argument("--calibrated")
    r.add_argument("--k", type=int, default=10)
    r.add_argument("--seed", type=int, default=0)
    r.add_argument("--out", required=True, help="output path stem")
    r.set_defaults(func=cmd_render)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        _say(f"error: {exc}")
        return 1
    except ConfigError as exc:
        _say(f"config error: {exc}")
        return 1
    except (FileNotFoundError, FormatError, nn.CheckpointError, GenerationError, PlacementError,
            RuntimeError, ValueError) as exc:
        _say(f"error: {exc}")
        return 2


if __name__ == "__main__":
    sys.exit(main())
