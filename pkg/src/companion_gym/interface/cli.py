"""``companion-gym`` command line.

Every subcommand prints one JSON record on stdout. Failures print a JSON
error record on stderr and exit non-zero.
"""

from __future__ import annotations

import argparse
import json
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Any, Callable, Sequence

import tomli

from ..catalog import Catalog, ProductIndex, build_product_index, ingest_products
from ..episode import (
    EpisodeConfig,
    Environment,
    HintLevel,
    Trajectory,
    behavioral_metrics,
    load_trajectories,
    run_episode,
)
from ..errors import CompanionError
from ..policies import PerfectPolicy, empty_policy
from ..rewards import Judge, OracleJudge, final_reward
from ..synth.instance import BenchmarkInstance, load_instances
from .metrics import accuracy_metric, success_metric

EXIT_USAGE = 2
EXIT_FAILURE = 1


class CliError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str) -> None:  # type: ignore[override]
        _emit_error("UsageError", message)
        raise SystemExit(EXIT_USAGE)


def _emit_error(kind: str, message: str) -> None:
    print(json.dumps({"error": kind, "message": message}), file=sys.stderr)


def load_config_file(path: str) -> dict[str, Any]:
    text = Path(path).read_bytes()
    if path.endswith(".toml"):
        return tomli.loads(text.decode("utf-8"))
    return json.loads(text)


def _apply_config(args: argparse.Namespace) -> argparse.Namespace:
    """Values from ``--config`` override command-line flags."""
    if getattr(args, "config", None):
        for key, value in load_config_file(args.config).items():
            dest = key.replace("-", "_")
            if not hasattr(args, dest):
                raise CliError(f"unknown config key {key!r}")
            setattr(args, dest, value)
    return args


def _catalog_for(args: argparse.Namespace, dataset: str | None = None) -> Catalog:
    path = args.catalog
    if path is None and dataset is not None:
        candidate = Path(dataset).parent / "products.jsonl"
        path = str(candidate) if candidate.exists() else None
    if path is None:
        raise CliError("no catalog given and no products.jsonl next to the dataset")
    return ingest_products(path)


def _index_for(args: argparse.Namespace, catalog: Catalog) -> ProductIndex:
    if getattr(args, "index", None) and (Path(args.index) / "index-meta.json").exists():
        return ProductIndex.load(args.index)
    return build_product_index(catalog)


def _judge(name: str, catalog: Catalog) -> Judge:
    if name == "llm":
        from ..llm import ChatClient, LLMJudge

        return LLMJudge(ChatClient.from_env(), catalog)
    return OracleJudge(catalog)


# index


def cmd_index(args: argparse.Namespace) -> dict[str, Any]:
    catalog = ingest_products(args.catalog)
    index = build_product_index(catalog, stem=args.stem)
    index.save(args.out)
    return {"products": len(catalog), "terms": len(index.postings), "out": str(args.out)}


# gen


def cmd_gen(args: argparse.Namespace) -> dict[str, Any]:
    from ..synth.backends import LLMBackend, MockBackend
    from ..synth.pipeline import SynthConfig, generate_dataset, write_dataset
    from ..synth.toydata import load_distractor_pool, make_catalog

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.catalog:
        catalog = ingest_products(args.catalog)
    else:
        catalog = make_catalog(args.catalog_size, seed=args.catalog_seed)
    (out / "products.jsonl").write_text(catalog.to_jsonl(), encoding="utf-8")
    if args.backend == "llm":
        from ..llm import ChatClient

        backend: Any = LLMBackend(ChatClient.from_env("COMPANION_GEN_MODEL"))
    else:
        backend = MockBackend(args.seed)
    n_addon = args.n // 2 if args.n_addon is None else args.n_addon
    n_single = args.n - n_addon if args.n_single is None else args.n_single
    config = SynthConfig(
        n_single=n_single,
        n_addon=n_addon,
        split=args.split,
        seed=args.seed,
        turn_range=(args.min_turns, args.max_turns),
    )
    result = generate_dataset(config, catalog, load_distractor_pool(args.pool), backend)
    paths = write_dataset(result, out)
    return {"stats": result.stats, "files": {k: str(v) for k, v in sorted(paths.items())}}


# run


def _policy_factory(name: str, catalog: Catalog) -> Callable[[BenchmarkInstance], Callable]:
    if name == "perfect":
        return lambda inst: PerfectPolicy(inst, catalog)
    if name == "empty":
        return lambda inst: empty_policy
    if name == "http":
        from ..llm import ChatClient, ChatPolicy

        policy = ChatPolicy(ChatClient.from_env("COMPANION_POLICY_MODEL"))
        return lambda inst: policy
    raise CliError(f"unknown policy {name!r}")


def _write_jsonl(path: Path, records: Sequence[str]) -> None:
    path.write_text("".join(r + "\n" for r in records), encoding="utf-8")


def cmd_run(args: argparse.Namespace) -> dict[str, Any]:
    instances = load_instances(args.dataset)
    if args.limit:
        instances = instances[: args.limit]
    catalog = _catalog_for(args, args.dataset)
    env = Environment(catalog, _index_for(args, catalog))
    judge = _judge(args.judge, catalog)
    make_policy = _policy_factory(args.policy, catalog)
    config = EpisodeConfig(max_turns=args.max_turns, hint=HintLevel(args.hint), max_feedback_rounds=args.feedback_rounds)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    preferences: dict[str, str] = {}
    if args.stage == "2":
        if not args.preferences:
            raise CliError("--stage 2 needs --preferences (a stage-1 trajectory log)")
        with open(args.preferences, encoding="utf-8") as fh:
            preferences = {t.instance_id: t.final_answer or "" for t in load_trajectories(fh)}

    def episode(inst: BenchmarkInstance) -> list[Trajectory]:
        policy = make_policy(inst)
        if args.stage == "both":
            first = run_episode(env, inst, "1", policy, config, judge)
            second = run_episode(env, inst, "2", policy, config, judge, preferences=first.final_answer or "")
            return [first, second]
        prefs = preferences.get(inst.instance_id, "") if args.stage == "2" else None
        return [run_episode(env, inst, args.stage, policy, config, judge, preferences=prefs)]

    with ThreadPoolExecutor(max_workers=max(1, args.workers)) as pool:
        results = list(pool.map(episode, instances))

    files: dict[str, str] = {}
    by_mode: dict[str, list[Trajectory]] = {}
    for trajs in results:
        for t in trajs:
            by_mode.setdefault(t.mode, []).append(t)
    for mode, trajs in sorted(by_mode.items()):
        path = out / f"trajectories_stage{mode}.jsonl"
        _write_jsonl(path, [t.to_json() for t in trajs])
        files[f"stage{mode}"] = str(path)
    feedback = [
        json.dumps({"instance_id": t.instance_id, **fb}, sort_keys=True)
        for t in by_mode.get("1", [])
        for fb in t.feedback
    ]
    if args.hint != "none":
        path = out / "feedback.jsonl"
        _write_jsonl(path, feedback)
        files["feedback"] = str(path)
    return {"episodes": sum(len(v) for v in by_mode.values()), "files": files}


# eval


def cmd_eval(args: argparse.Namespace) -> dict[str, Any]:
    instances = {i.instance_id: i for path in args.dataset for i in load_instances(path)}
    catalog = _catalog_for(args, args.dataset[0])
    judge = _judge(args.judge, catalog)
    trajectories: list[Trajectory] = []
    for path in args.logs:
        with open(path, encoding="utf-8") as fh:
            trajectories.extend(load_trajectories(fh))
    if not trajectories:
        raise CliError("no trajectories in the given logs")
    stage1 = [t for t in trajectories if t.mode == "1"]
    stage2 = [t for t in trajectories if t.mode == "2"]
    report: dict[str, Any] = {"trajectories": len(trajectories)}
    if stage1:
        report["accuracy"] = accuracy_metric(stage1, instances, judge)
    if stage2:
        report["success"] = success_metric(stage2, instances, catalog, judge)
    rewards = []
    for t in stage1 + stage2:
        inst = instances.get(t.instance_id)
        if inst is None:
            raise CliError(f"trajectory for unknown instance {t.instance_id!r}")
        total = final_reward(t, inst.gold, judge).total
        if total is not None:
            rewards.append(float(total))
    if rewards:
        report["mean_reward"] = round(sum(rewards) / len(rewards), 6)
    report["behavior"] = behavioral_metrics(trajectories).to_dict()
    return report


# serve


def cmd_serve(args: argparse.Namespace) -> dict[str, Any]:
    from .service import ServiceConfig, serve

    catalog = args.catalog or str(Path(args.dataset[0]).parent / "products.jsonl")
    serve(
        ServiceConfig(
            catalog=catalog,
            datasets=tuple(args.dataset),
            index_dir=args.index,
            host=args.host,
            port=args.port,
            judge=args.judge,
            max_in_flight=args.max_in_flight,
        )
    )
    return {"stopped": True}


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="companion-gym", description="Shopping-agent environment, reward server and benchmark generator.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("index", help="build the product search index")
    p.add_argument("--catalog", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--stem", action="store_true")
    p.add_argument("--config")
    p.set_defaults(func=cmd_index)

    p = sub.add_parser("gen", help="synthesize a benchmark")
    p.add_argument("--n", type=int, default=20)
    p.add_argument("--n-single", type=int)
    p.add_argument("--n-addon", type=int)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="data")
    p.add_argument("--catalog")
    p.add_argument("--catalog-size", type=int, default=300)
    p.add_argument("--catalog-seed", type=int, default=0)
    p.add_argument("--pool", help="distractor session pool (JSON list of sessions)")
    p.add_argument("--split", type=float, default=0.8)
    p.add_argument("--min-turns", type=int, default=15)
    p.add_argument("--max-turns", type=int, default=50)
    p.add_argument("--backend", choices=("mock", "llm"), default="mock")
    p.add_argument("--config")
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("run", help="run episodes against a policy")
    p.add_argument("--dataset", required=True)
    p.add_argument("--catalog")
    p.add_argument("--index")
    p.add_argument("--stage", choices=("1", "2", "both", "one-stage"), default="both")
    p.add_argument("--hint", choices=("none", "low", "high"), default="none")
    p.add_argument("--judge", choices=("oracle", "llm"), default="oracle")
    p.add_argument("--policy", choices=("perfect", "empty", "http"), default="http")
    p.add_argument("--preferences", help="stage-1 log supplying stage-2 preferences")
    p.add_argument("--max-turns", type=int, default=20)
    p.add_argument("--feedback-rounds", type=int, default=2)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--limit", type=int)
    p.add_argument("--out", default="runs")
    p.add_argument("--config")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("eval", help="score trajectory logs")
    p.add_argument("--dataset", required=True, nargs="+")
    p.add_argument("--logs", required=True, nargs="+")
    p.add_argument("--catalog")
    p.add_argument("--judge", choices=("oracle", "llm"), default="oracle")
    p.add_argument("--config")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("serve", help="start the HTTP reward and environment service")
    p.add_argument("--dataset", required=True, nargs="+")
    p.add_argument("--catalog")
    p.add_argument("--index")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8080)
    p.add_argument("--judge", choices=("oracle", "llm"), default="oracle")
    p.add_argument("--max-in-flight", type=int, default=64)
    p.add_argument("--config")
    p.set_defaults(func=cmd_serve)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        result = args.func(_apply_config(args))
    except (CompanionError, CliError, OSError, ValueError, KeyError) as exc:
        _emit_error(type(exc).__name__, str(exc))
        return EXIT_FAILURE
    print(json.dumps(result, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
