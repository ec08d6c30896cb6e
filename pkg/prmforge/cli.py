import argparse
import asyncio
import contextlib
import json
import logging
import sys
from collections.abc import Callable, Sequence
from pathlib import Path
from typing import IO, Any, NoReturn

from prmforge.config import (
    ENV_API_BASE,
    ENV_API_KEY,
    RunConfig,
    SamplingParams,
    SearchSettings,
    load_config,
)
from prmforge.dataset import emit, load_problems, stats
from prmforge.errors import AuthError, PrmForgeError, ValidationError
from prmforge.models import AggregationMethod
from prmforge.policy import build_backend
from prmforge.reranker import (
    generate_candidates,
    load_candidates,
    save_candidates,
    sweep,
)
from prmforge.runner import AnnotationRunner, ProblemResult
from prmforge.scoring import build_scorer
from prmforge.telemetry import ProgressReporter, Telemetry, setup_logging
from prmforge.utils import main

__all__ = ["build_parser", "cmd_generate", "cmd_rerank", "cmd_stats", "run"]

logger = logging.getLogger(__name__)

EX_OK = 0
EX_FAILURE = 1
EX_INPUT = 2
EX_AUTH = 3
EX_USAGE = 64

_SEARCH = SearchSettings()
_SAMPLING = SamplingParams()
_RUN = RunConfig()


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str) -> NoReturn:
        self.print_usage(sys.stderr)
        self.exit(EX_USAGE, f"{self.prog}: error: {message}\n")


def _int_list(text: str) -> list[int]:
    try:
        values = [int(part) for part in text.split(",") if part.strip()]
    except ValueError as err:
        raise argparse.ArgumentTypeError(f"not a list of integers: {text}") from err
    if not values or any(value < 1 for value in values):
        raise argparse.ArgumentTypeError(f"need positive integers: {text}")
    return values


def _method_list(text: str) -> list[AggregationMethod]:
    methods = []
    for part in (part.strip() for part in text.split(",")):
        if not part:
            continue
        if part.lower() == "all":
            methods.extend(AggregationMethod)
            continue
        try:
            methods.append(AggregationMethod(part))
        except ValueError as err:
            known = ", ".join(str(method) for method in AggregationMethod)
            raise argparse.ArgumentTypeError(
                f"unknown method {part!r} (choose from {known})"
            ) from err
    if not methods:
        raise argparse.ArgumentTypeError("no methods given")
    return list(dict.fromkeys(methods))


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", type=Path, help="YAML configuration file")
    parser.add_argument("--problems", type=Path, help="problems JSONL")
    parser.add_argument(
        "--backend",
        choices=["remote", "mock"],
        help="policy backend (default: remote, endpoint from "
        f"${ENV_API_BASE}, key from ${ENV_API_KEY})",
    )
    parser.add_argument("--mock-script", type=Path, help="mock policy script")
    parser.add_argument(
        "--seed", type=int, help=f"root random seed (default: {_RUN.seed})"
    )
    parser.add_argument(
        "--workers",
        type=int,
        help=f"problems processed concurrently (default: {_RUN.workers})",
    )
    parser.add_argument(
        "--temperature",
        type=float,
        help=f"sampling temperature (default: {_SAMPLING.temperature})",
    )
    parser.add_argument(
        "--top-k", type=int, help=f"sampling top-k (default: {_SAMPLING.top_k})"
    )
    parser.add_argument(
        "--top-p", type=float, help=f"sampling top-p (default: {_SAMPLING.top_p})"
    )
    parser.add_argument(
        "--log-level", help=f"log level (default: {_RUN.log_level})"
    )


def _add_rerank(parser: argparse.ArgumentParser, default_methods: str) -> None:
    _add_common(parser)
    parser.add_argument("--candidates", type=Path, help="pre-generated candidates")
    parser.add_argument(
        "--candidates-out", type=Path, help="save generated candidates here"
    )
    parser.add_argument(
        "--n",
        type=_int_list,
        help="candidates per problem, comma list for a sweep "
        f"(default: {','.join(map(str, _RUN.n))})",
    )
    parser.add_argument(
        "--methods",
        type=_method_list,
        help=f"aggregation methods, comma list or 'all' (default: {default_methods})",
    )
    parser.add_argument(
        "--scorer",
        choices=["oracle", "constant", "random", "remote"],
        help=f"step scorer (default: {_RUN.scorer.kind})",
    )
    parser.add_argument("--scorer-url", help="remote scorer endpoint")
    parser.add_argument("--report-out", type=Path, help="write reports here too")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(
        prog="prmforge",
        description="Automated step-level supervision for process reward models.",
    )
    commands = parser.add_subparsers(
        dest="command", required=True, parser_class=_Parser
    )

    generate = commands.add_parser("generate", help="annotate problems by tree search")
    _add_common(generate)
    generate.add_argument(
        "--out", type=Path, help="annotations JSONL (default: stdout)"
    )
    generate.add_argument(
        "--max-rollouts",
        type=int,
        help=f"rollouts per problem (default: {_SEARCH.max_rollouts})",
    )
    generate.add_argument(
        "--max-search-steps",
        type=int,
        help=f"search steps per problem (default: {_SEARCH.max_search_steps})",
    )
    generate.add_argument(
        "--k", type=int, help=f"rollouts per MC estimate (default: {_SEARCH.k})"
    )
    generate.add_argument(
        "--c-puct",
        type=float,
        help=f"exploration coefficient (default: {_SEARCH.c_puct})",
    )
    generate.add_argument(
        "--rollout-workers",
        type=int,
        help=f"concurrent requests per MC estimate (default: {_RUN.rollout_workers})",
    )
    generate.add_argument(
        "--label-mode",
        choices=["soft", "hard"],
        help=f"label written per step (default: {_RUN.label_mode})",
    )
    generate.add_argument(
        "--hard-threshold",
        type=float,
        help=f"hard label is 1 iff MC > threshold (default: {_RUN.hard_threshold})",
    )
    generate.add_argument(
        "--tree-out", type=Path, help="write each problem's search tree as JSONL"
    )

    rerank = commands.add_parser("rerank", help="best-of-N accuracy per method")
    _add_rerank(rerank, ",".join(map(str, _RUN.methods)))

    eval_agg = commands.add_parser(
        "eval-agg", help="best-of-N accuracy over every aggregation method"
    )
    _add_rerank(eval_agg, "all")

    stats_cmd = commands.add_parser("stats", help="summarise an annotation JSONL")
    stats_cmd.add_argument("path", type=Path, help="annotation JSONL")
    stats_cmd.add_argument("--log-level", help=f"log level (default: {_RUN.log_level})")

    return parser


def overrides_from(args: argparse.Namespace) -> dict[str, Any]:
    """Map parsed flags onto the nested RunConfig shape; unset flags are None."""

    def get(name: str) -> Any:
        return getattr(args, name, None)

    return {
        "backend": {"kind": get("backend"), "mock_script": get("mock_script")},
        "sampling": {
            "temperature": get("temperature"),
            "top_k": get("top_k"),
            "top_p": get("top_p"),
        },
        "search": {
            "max_rollouts": get("max_rollouts"),
            "max_search_steps": get("max_search_steps"),
            "k": get("k"),
            "c_puct": get("c_puct"),
        },
        "scorer": {"kind": get("scorer"), "url": get("scorer_url")},
        "workers": get("workers"),
        "rollout_workers": get("rollout_workers"),
        "seed": get("seed"),
        "problems": get("problems"),
        "out": get("out"),
        "report_out": get("report_out"),
        "tree_out": get("tree_out"),
        "candidates": get("candidates"),
        "candidates_out": get("candidates_out"),
        "n": get("n"),
        "methods": get("methods"),
        "label_mode": get("label_mode"),
        "hard_threshold": get("hard_threshold"),
        "log_level": get("log_level"),
    }


@contextlib.contextmanager
def _open_out(path: Path | None, fallback: IO[str] | None):
    if path is None:
        yield fallback
        return
    with open(path, "w", encoding="utf-8") as fh:
        yield fh


def _report_progress_failure(err: BaseException) -> None:
    logger.warning("Progress report failed: %s", err, exc_info=err)


def _print_json(document: Any, stream: IO[str]) -> None:
    stream.write(json.dumps(document, ensure_ascii=False) + "\n")
    stream.flush()


async def cmd_generate(config: RunConfig) -> int:
    """
    Annotate every problem and stream annotations in input order.

    Returns:
        0 on success, 2 on unreadable input, 3 on rejected credentials.
    """
    if config.problems is None:
        raise UsageError("generate needs --problems")
    try:
        problems = load_problems(config.problems)
    except (OSError, ValidationError) as err:
        logger.error("Cannot read problems: %s", err)
        return EX_INPUT

    by_id = {problem.id: problem for problem in problems}
    policy = build_backend(config.backend, seed=config.seed)
    telemetry = Telemetry()
    runner = AnnotationRunner(
        policy,
        config.search,
        params=config.sampling,
        telemetry=telemetry,
        workers=config.workers,
        rollout_workers=config.rollout_workers,
    )
    results: list[ProblemResult] = []
    write_errors: list[OSError] = []

    try:
        with (
            _open_out(config.out, sys.stdout) as sink,
            _open_out(config.tree_out, None) as tree_sink,
        ):
            assert sink is not None

            def write(index: int, result: ProblemResult) -> None:
                if write_errors:
                    return
                try:
                    emit(
                        result.annotations,
                        config.label_mode,
                        sink,
                        by_id,
                        threshold=config.hard_threshold,
                    )
                    sink.flush()
                    if tree_sink is not None and not result.skipped:
                        tree = result.tree.to_dict()
                        _print_json(
                            {"problem_id": result.problem.id, "tree": tree},
                            tree_sink,
                        )
                except OSError as err:
                    write_errors.append(err)
                    runner.stop()
                    return
                results.append(result)

            runner.on_result.add_listener(write)
            reporter = ProgressReporter(
                telemetry, runner.progress, config.progress_interval
            )
            reporter.on_error.add_listener(_report_progress_failure)
            async with reporter:
                await runner.run(problems)
            if write_errors:
                raise write_errors[0]
    except AuthError as err:
        logger.error("Backend rejected the credentials: %s", err)
        return EX_AUTH
    except OSError as err:
        logger.error("Cannot write output: %s", err)
        return EX_FAILURE
    finally:
        await policy.aclose()

    summary = {
        "processed": len(results),
        "skipped": sum(result.skipped for result in results),
        "annotations": sum(len(result.annotations) for result in results),
        "rollouts_used": sum(result.budget.used_rollouts for result in results),
        "search_steps_used": sum(
            result.budget.used_search_steps for result in results
        ),
        "backend_calls": policy.ledger.calls,
        "per_problem": [result.summary() for result in results],
    }
    _print_json(summary, sys.stdout if config.out is not None else sys.stderr)
    return EX_OK


async def cmd_rerank(
    config: RunConfig,
    n: Sequence[int] | None = None,
    methods: Sequence[AggregationMethod] | None = None,
) -> int:
    """
    Best-of-N accuracy, one JSON report line per ``n``.

    Candidates come from ``config.candidates`` or, failing that, are sampled
    from a configured backend.

    Returns:
        0 on success, 2 on unreadable or missing input, 3 on rejected
        credentials.
    """
    ns = list(n or config.n)
    methods = list(methods or config.methods)
    if config.problems is None:
        raise UsageError("rerank needs --problems")
    try:
        problems = load_problems(config.problems)
    except (OSError, ValidationError) as err:
        logger.error("Cannot read problems: %s", err)
        return EX_INPUT

    scorer = build_scorer(config.scorer, seed=config.seed)
    try:
        if config.candidates is not None:
            try:
                candidates = load_candidates(config.candidates)
            except (OSError, ValidationError) as err:
                logger.error("Cannot read candidates: %s", err)
                return EX_INPUT
        elif config.backend.kind == "mock" or config.backend.api_base:
            policy = build_backend(config.backend, seed=config.seed)
            try:
                candidates = await generate_candidates(
                    problems,
                    policy,
                    max(ns),
                    params=config.sampling,
                    workers=config.workers,
                )
            finally:
                await policy.aclose()
            if config.candidates_out is not None:
                with open(config.candidates_out, "w", encoding="utf-8") as fh:
                    save_candidates(candidates, fh)
        else:
            logger.error("No candidates: pass --candidates or configure a backend")
            return EX_INPUT

        try:
            reports = await sweep(
                problems,
                candidates,
                scorer,
                methods,
                ns,
                seed=config.seed,
                workers=config.workers,
                telemetry=Telemetry(),
            )
        except ValidationError as err:
            logger.error("Missing candidates: %s", err)
            return EX_INPUT
    except AuthError as err:
        logger.error("Backend rejected the credentials: %s", err)
        return EX_AUTH
    finally:
        await scorer.aclose()

    with _open_out(config.report_out, None) as report_sink:
        for report in reports:
            _print_json(report, sys.stdout)
            if report_sink is not None:
                _print_json(report, report_sink)
    return EX_OK


def cmd_stats(path: Path) -> int:
    """Print corpus statistics as JSON; 2 when the file cannot be read."""
    try:
        with open(path, "rb") as fh:
            report = stats(fh)
    except OSError as err:
        logger.error("Cannot read %s: %s", path, err)
        return EX_INPUT
    for error in report["errors"]:
        logger.warning("Malformed record on line %d: %s", error["line"], error["error"])
    sys.stdout.write(json.dumps(report, indent=2, ensure_ascii=False) + "\n")
    return EX_OK


def _dispatch(args: argparse.Namespace) -> Callable[[RunConfig], Any]:
    match args.command:
        case "generate":
            return cmd_generate
        case "rerank":
            return lambda config: cmd_rerank(config, args.n, args.methods)
        case _:
            return lambda config: cmd_rerank(
                config, args.n, args.methods or list(AggregationMethod)
            )


def run(argv: Sequence[str] | None = None) -> int:
    """Console entry point; returns the process exit code."""
    parser = build_parser()
    args = parser.parse_args(argv)

    if args.command == "stats":
        setup_logging(args.log_level or _RUN.log_level)
        return cmd_stats(args.path)

    if args.config is not None and not args.config.exists():
        setup_logging(_RUN.log_level)
        logger.error("Config file %s not found", args.config)
        return EX_INPUT

    try:
        config = load_config(args.config, overrides_from(args))
    except ValidationError as err:
        parser.exit(EX_USAGE, f"prmforge: error: {err}\n")

    setup_logging(config.log_level)
    command = _dispatch(args)

    @main
    async def entry() -> int:
        return await command(config)

    try:
        return asyncio.run(entry())
    except UsageError as err:
        parser.exit(EX_USAGE, f"prmforge: error: {err}\n")
    except ValidationError as err:
        logger.error("%s", err)
        return EX_USAGE
    except PrmForgeError as err:
        logger.error("Run failed: %s", err)
        return EX_FAILURE
