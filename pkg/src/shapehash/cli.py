"""Command-line client for the pipeline service.

Every subcommand builds a JSON request and posts it to the HTTP service: by
default an in-process instance (no server required), or a remote one when
``--server`` is given.  Configuration comes from one JSON file (``--config``)
with flag-level overrides.  Exit codes: 0 success, 1 usage error, 2 data
error, 3 numerical error.
"""

from __future__ import annotations

import argparse
import asyncio
import json
import sys
from dataclasses import asdict, replace
from pathlib import Path

import httpx

from .config import PipelineConfig
from .errors import DataError, NumericalError

_USAGE, _DATA, _NUMERICAL = 1, 2, 3


class CliFailure(Exception):
    """A command failed; carries the exit code and a printable message."""

    def __init__(self, message: str, exit_code: int) -> None:
        super().__init__(message)
        self.exit_code = exit_code


class ServiceClient:
    """Posts JSON requests either in-process (ASGI) or to a remote server."""

    def __init__(self, server: str | None = None) -> None:
        self._server = server

    def post(self, path: str, payload: dict) -> dict:
        return asyncio.run(self._post(path, payload))

    async def _post(self, path: str, payload: dict) -> dict:
        if self._server:
            client = httpx.AsyncClient(base_url=self._server, timeout=None)
        else:
            from .service import create_app

            client = httpx.AsyncClient(
                transport=httpx.ASGITransport(app=create_app()),
                base_url="http://shapehash.internal",
                timeout=None,
            )
        try:
            try:
                response = await client.post(path, json=payload)
            except httpx.HTTPError as exc:
                raise CliFailure(f"cannot reach service: {exc}", _USAGE) from exc
            if response.status_code == 200:
                return response.json()
            raise _failure_from_response(response)
        finally:
            await client.aclose()


def _failure_from_response(response: httpx.Response) -> CliFailure:
    try:
        body = response.json()
    except json.JSONDecodeError:
        body = {}
    detail = body.get("detail", response.text)
    kind = body.get("error_kind")
    if response.status_code == 422:
        return CliFailure(f"invalid request: {detail}", _USAGE)
    if kind == "numerical":
        return CliFailure(str(detail), _NUMERICAL)
    if kind == "data" or response.status_code == 400:
        return CliFailure(str(detail), _DATA)
    return CliFailure(f"service error ({response.status_code}): {detail}", _USAGE)


# ---------------------------------------------------------------------------
# Argument parsing
# ---------------------------------------------------------------------------


def _add_common(sub: argparse.ArgumentParser) -> None:
    sub.add_argument("--config", type=Path, help="JSON config file")
    sub.add_argument("--server", help="base URL of a running service instance")
    sub.add_argument("--workdir", type=Path, help="pipeline working directory")
    sub.add_argument("--seed", type=int, help="seed for any randomized stage")
    sub.add_argument("--json", action="store_true", help="print the raw JSON response")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="shapehash",
        description="Shape-descriptor hashing and Hamming retrieval pipeline",
    )
    commands = parser.add_subparsers(dest="command")

    p = commands.add_parser("preprocess", help="sigma-clip manifest images")
    _add_common(p)
    p.add_argument("--manifest", type=Path, help="path,label,split CSV")
    p.add_argument("--n-sigma", type=float, help="clipping bound multiplier")
    p.add_argument("--max-iters", type=int, help="clipping iteration cap")
    p.set_defaults(handler=_cmd_preprocess)

    p = commands.add_parser("build-bank", help="configure filters on prototypes")
    _add_common(p)
    p.add_argument("--filters-per-class", type=int)
    p.add_argument("--orientations", type=int, help="rotation-tolerance count")
    p.set_defaults(handler=_cmd_build_bank)

    p = commands.add_parser("describe", help="compute descriptors per split")
    _add_common(p)
    p.add_argument("--threads", type=int, help="worker threads")
    p.set_defaults(handler=_cmd_describe)

    p = commands.add_parser("train", help="train the hashing network")
    _add_common(p)
    p.add_argument("--bits", type=int, help="code length")
    p.add_argument("--epochs", type=int)
    p.add_argument("--grid", action="store_true", help="run the full hyperparameter grid")
    p.set_defaults(handler=_cmd_train)

    p = commands.add_parser("sweep-threshold", help="calibrate the binarization threshold")
    _add_common(p)
    p.add_argument("--k-eval", type=int, help="mAP cutoff")
    p.set_defaults(handler=_cmd_sweep)

    p = commands.add_parser("encode", help="binarize one split into a codes file")
    _add_common(p)
    p.add_argument("--split", choices=("train", "valid", "test"), default="train")
    p.add_argument("--threshold", type=float, help="binarization threshold")
    p.set_defaults(handler=_cmd_encode)

    p = commands.add_parser("query", help="rank an index for one query")
    _add_common(p)
    p.add_argument("--index", type=Path, help="codes file to search")
    p.add_argument("--top-n", type=int, help="results to return")
    p.add_argument("--code-file", type=Path, help="codes file holding the query")
    p.add_argument("--image", type=Path, help="query image (pgm or rawf32)")
    p.add_argument("--bank", type=Path, help="filter bank (image queries)")
    p.add_argument("--model", type=Path, help="model file (image queries)")
    p.add_argument("--threshold", type=float, help="binarization threshold")
    p.set_defaults(handler=_cmd_query)

    p = commands.add_parser("evaluate", help="score a query set against an index")
    _add_common(p)
    p.add_argument("--index", type=Path, help="reference codes file")
    p.add_argument("--queries", type=Path, help="query codes file")
    p.add_argument("--k-eval", type=int, help="mAP cutoff")
    p.set_defaults(handler=_cmd_evaluate)

    p = commands.add_parser("flops", help="per-component operation counts")
    _add_common(p)
    p.add_argument("--bits", type=int, help="code length of the output layer")
    p.add_argument("--input-dim", type=int, help="descriptor length")
    p.add_argument("--bank", type=Path, help="also estimate the descriptor stage")
    p.add_argument("--width", type=int, help="image width for the estimate")
    p.add_argument("--height", type=int, help="image height for the estimate")
    p.set_defaults(handler=_cmd_flops)

    p = commands.add_parser("serve", help="run the HTTP service")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8753)
    p.set_defaults(handler=_cmd_serve)

    return parser


def _load_config(args: argparse.Namespace) -> PipelineConfig:
    cfg = PipelineConfig.load(args.config) if getattr(args, "config", None) else PipelineConfig()
    if getattr(args, "workdir", None):
        cfg = cfg.model_copy(update={"workdir": args.workdir})
    return cfg


def _require_workdir(cfg: PipelineConfig) -> str:
    if cfg.workdir is None:
        raise CliFailure("a working directory is required (--workdir or config)", _USAGE)
    return str(cfg.workdir)


def _print_or_json(args: argparse.Namespace, payload: dict, lines: list[str]) -> None:
    if args.json:
        print(json.dumps(payload, indent=2, sort_keys=True))
    else:
        for line in lines:
            print(line)


# ---------------------------------------------------------------------------
# Command handlers
# ---------------------------------------------------------------------------


def _cmd_preprocess(args, cfg: PipelineConfig, client: ServiceClient) -> int:
    manifest = args.manifest or cfg.manifest
    if manifest is None:
        raise CliFailure("a manifest is required (--manifest or config)", _USAGE)
    payload = client.post(
        "/pipeline/preprocess",
        {
            "manifest": str(manifest),
            "workdir": _require_workdir(cfg),
            "n_sigma": args.n_sigma if args.n_sigma is not None else cfg.n_sigma,
            "max_iters": args.max_iters if args.max_iters is not None else cfg.clip_max_iters,
        },
    )
    total = sum(payload["counts"].values())
    lines = [f"preprocessed {total} images -> {payload['images_dir']}"]
    lines += [f"  {split}: {n}" for split, n in sorted(payload["counts"].items())]
    lines.append(f"manifest: {payload['out_manifest']}")
    _print_or_json(args, payload, lines)
    return 0


def _cmd_build_bank(args, cfg: PipelineConfig, client: ServiceClient) -> int:
    payload = client.post(
        "/pipeline/build-bank",
        {
            "workdir": _require_workdir(cfg),
            "cosfire": asdict(cfg.cosfire),
            "orientation_count": args.orientations or cfg.orientation_count,
            "filters_per_class": args.filters_per_class or cfg.filters_per_class,
            "seed": args.seed if args.seed is not None else cfg.train.seed,
        },
    )
    lines = [
        f"configured {payload['n_filters']} filters over classes "
        f"{', '.join(payload['classes'])}",
        f"keypoints per filter: {payload['tuples_per_filter']}",
        f"bank: {payload['bank']}",
    ]
    _print_or_json(args, payload, lines)
    return 0


def _cmd_describe(args, cfg: PipelineConfig, client: ServiceClient) -> int:
    payload = client.post(
        "/pipeline/describe",
        {
            "workdir": _require_workdir(cfg),
            "threads": args.threads if args.threads is not None else cfg.threads,
        },
    )
    lines = [f"descriptor length {payload['descriptor_length']}"]
    lines += [
        f"  {split}: {payload['rows'][split]} rows -> {path}"
        for split, path in sorted(payload["files"].items())
    ]
    _print_or_json(args, payload, lines)
    return 0


def _cmd_train(args, cfg: PipelineConfig, client: ServiceClient) -> int:
    train_cfg = cfg.train
    if args.seed is not None:
        train_cfg = replace(train_cfg, seed=args.seed)
    if args.epochs is not None:
        train_cfg = replace(train_cfg, epochs=args.epochs)
    bits = args.bits if args.bits is not None else cfg.bits
    if args.grid:
        payload = client.post(
            "/pipeline/grid",
            {
                "workdir": _require_workdir(cfg),
                "bits": bits,
                "grid": cfg.grid.model_dump(),
                "train": asdict(train_cfg),
                "hidden": list(cfg.hidden),
            },
        )
        best = payload["best"]
        lines = [
            f"ran {payload['combinations']} grid combinations at {payload['bits']} bits",
            f"best validation mAP {best['best_val_map']:.4f} "
            f"(lr={best['learning_rate']}, batch={best['batch_size']}, "
            f"margin={best['margin']}, reg={best['reg_weight']})",
            f"rows: {payload['csv']}",
        ]
        _print_or_json(args, payload, lines)
        return 0
    payload = client.post(
        "/pipeline/train",
        {
            "workdir": _require_workdir(cfg),
            "bits": bits,
            "train": asdict(train_cfg),
            "loss": asdict(cfg.loss),
            "hidden": list(cfg.hidden),
        },
    )
    lines = [
        f"trained {payload['bits']}-bit model for {payload['epochs_run']} epochs",
        f"best epoch {payload['best_epoch']} "
        f"(validation mAP {payload['best_val_map']:.4f})",
        f"model: {payload['model']}",
    ]
    _print_or_json(args, payload, lines)
    return 0


def _cmd_sweep(args, cfg: PipelineConfig, client: ServiceClient) -> int:
    payload = client.post(
        "/pipeline/sweep-threshold",
        {
            "workdir": _require_workdir(cfg),
            "k_eval": args.k_eval if args.k_eval is not None else cfg.k_eval,
        },
    )
    lines = [f"best threshold {payload['best_threshold']:+.1f}"]
    lines += [
        f"  {point['threshold']:+.1f}  mAP@{payload['k_eval']} = {point['map_at_k']:.4f}"
        for point in payload["curve"]
    ]
    _print_or_json(args, payload, lines)
    return 0


def _cmd_encode(args, cfg: PipelineConfig, client: ServiceClient) -> int:
    payload = client.post(
        "/pipeline/encode",
        {
            "workdir": _require_workdir(cfg),
            "split": args.split,
            "threshold": args.threshold if args.threshold is not None else cfg.threshold,
        },
    )
    lines = [
        f"encoded {payload['count']} {payload['split']} codes "
        f"({payload['bits']} bits at threshold {payload['threshold']:+.2f})",
        f"codes: {payload['codes']}",
    ]
    _print_or_json(args, payload, lines)
    return 0


def _cmd_query(args, cfg: PipelineConfig, client: ServiceClient) -> int:
    workdir = cfg.workdir
    index = args.index or (Path(workdir) / "codes" / "train.codes" if workdir else None)
    if index is None:
        raise CliFailure("an index is required (--index or --workdir)", _USAGE)
    request = {
        "index": str(index),
        "top_n": args.top_n if args.top_n is not None else 10,
        "threshold": args.threshold if args.threshold is not None else cfg.threshold,
        "n_sigma": cfg.n_sigma,
        "max_iters": cfg.clip_max_iters,
    }
    if args.code_file:
        request["code_file"] = str(args.code_file)
    if args.image:
        request["image"] = str(args.image)
        bank = args.bank or (Path(workdir) / "bank.json" if workdir else None)
        model = args.model or (Path(workdir) / "model.chsh" if workdir else None)
        if bank:
            request["bank"] = str(bank)
        if model:
            request["model"] = str(model)
    payload = client.post("/retrieval/query", request)
    lines = [
        f"{rank}. id={hit['id']} label={hit['label']} distance={hit['distance']}"
        for rank, hit in enumerate(payload["results"], start=1)
    ]
    _print_or_json(args, payload, lines)
    return 0


def _cmd_evaluate(args, cfg: PipelineConfig, client: ServiceClient) -> int:
    workdir = _require_workdir(cfg)
    index = args.index or Path(workdir) / "codes" / "train.codes"
    queries = args.queries or Path(workdir) / "codes" / "test.codes"
    payload = client.post(
        "/pipeline/evaluate",
        {
            "workdir": workdir,
            "index": str(index),
            "queries": str(queries),
            "k_eval": args.k_eval if args.k_eval is not None else cfg.k_eval,
        },
    )
    report = payload["map_at_r"]
    lines = [
        f"mAP@{payload['k_eval']} = {payload['map_at_k']:.4f}",
        f"mAP@(k=R) class average = {report['average']:.4f}",
    ]
    lines += [
        f"  {label}: mAP {entry['map']:.4f} over {entry['queries']} queries "
        f"(R={entry['relevant']})"
        for label, entry in sorted(report["per_class"].items())
    ]
    lines += [
        f"query-set separability ratio = {payload['query_set_separability']:.4f}",
        f"cross-set separability ratio = {payload['cross_separability']:.4f}",
    ]
    _print_or_json(args, payload, lines)
    return 0


def _cmd_flops(args, cfg: PipelineConfig, client: ServiceClient) -> int:
    request: dict = {}
    input_dim = args.input_dim if args.input_dim is not None else 372
    bits = args.bits if args.bits is not None else 72
    request["layer_sizes"] = [input_dim, cfg.hidden[0], cfg.hidden[1], bits]
    if args.bank:
        request["bank"] = str(args.bank)
    if args.width is not None:
        request["width"] = args.width
    if args.height is not None:
        request["height"] = args.height
    if cfg.workdir is not None:
        request["workdir"] = str(cfg.workdir)
    payload = client.post("/pipeline/flops", request)
    width = max(len(c["name"]) for c in payload["components"])
    lines = [f"  {c['name']:<{width}}  {c['flops']:>12,}" for c in payload["components"]]
    lines.append(f"  {'total':<{width}}  {payload['network_total']:>12,}")
    lines.append(
        f"descriptor stage reference: {payload['descriptor_stage_reference']:,} "
        f"(combined {payload['combined_reference']:,})"
    )
    if payload.get("descriptor_stage_estimate"):
        est = payload["descriptor_stage_estimate"]
        lines.append(
            f"descriptor stage estimate for {est['bank']}: {est['flops']:,} "
            f"({est['width']}x{est['height']}, {est['orientation_count']} orientations)"
        )
    _print_or_json(args, payload, lines)
    return 0


def _cmd_serve(args, cfg: PipelineConfig, client: ServiceClient) -> int:
    import uvicorn

    from .service import create_app

    uvicorn.run(create_app(), host=args.host, port=args.port)
    return 0


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code == 0 else _USAGE
    if getattr(args, "command", None) is None:
        parser.print_usage(sys.stderr)
        return _USAGE
    try:
        cfg = _load_config(args) if args.command != "serve" else PipelineConfig()
        client = ServiceClient(getattr(args, "server", None))
        return args.handler(args, cfg, client)
    except CliFailure as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except NumericalError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return _NUMERICAL
    except DataError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return _DATA
    except KeyboardInterrupt:
        return _USAGE


def entrypoint() -> None:
    sys.exit(main())
