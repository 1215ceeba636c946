"""Thin command-line client for the service.

Every subcommand reads an optional JSON config document, applies flag
overrides, and posts the result to the HTTP API. Without --server the app
runs in-process, so the CLI works with no daemon running; with --server the
same payloads go to a remote instance.

Exit codes: 0 success, 2 user or config error (HTTP 400/422), 1 anything
else.
"""

from __future__ import annotations

import json
import logging
import sys
from pathlib import Path

import click

from oodkit import __version__


class Client:
    def __init__(self, server: str | None):
        if server:
            import httpx

            self._client = httpx.Client(base_url=server, timeout=None)
        else:
            import warnings

            with warnings.catch_warnings():
                # import-time deprecation noise; category varies by
                # starlette version (UserWarning here), so drop them all
                warnings.simplefilter("ignore")
                from fastapi.testclient import TestClient

            from oodkit.service.app import app

            self._client = TestClient(app, raise_server_exceptions=False)

    def post(self, path: str, payload: dict):
        return self._client.post(path, json=payload)

    def get(self, path: str):
        return self._client.get(path)


def _fail(message: str, code: int = 2) -> None:
    click.echo(f"error: {message}", err=True)
    sys.exit(code)


def _finish(resp) -> None:
    if resp.status_code == 200:
        click.echo(json.dumps(resp.json(), indent=2, sort_keys=True))
        return
    try:
        detail = resp.json().get("detail")
    except Exception:
        detail = resp.text
    if not isinstance(detail, str):
        detail = json.dumps(detail)
    click.echo(f"error ({resp.status_code}): {detail}", err=True)
    sys.exit(2 if resp.status_code in (400, 422) else 1)


def _load_doc(config_path: str | None) -> dict:
    if config_path is None:
        return {}
    path = Path(config_path)
    if not path.exists():
        _fail(f"config not found: {path}")
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        _fail(f"config is not valid JSON: {exc}")
    if not isinstance(doc, dict):
        _fail("config must be a JSON object")
    return doc


def _parse_method(text: str) -> dict:
    """`fmap|msp|energy|odin` or `fusion:STRATEGY:A+B`."""
    if ":" not in text:
        return {"kind": text}
    parts = text.split(":")
    if len(parts) != 3 or parts[0] != "fusion" or "+" not in parts[2]:
        raise click.BadParameter("expected KIND or fusion:STRATEGY:A+B")
    a, _, b = parts[2].partition("+")
    return {"kind": "fusion", "strategy": parts[1], "a": a, "b": b}


_common = [
    click.option("--config", "config_path", type=str, default=None, help="JSON config document."),
    click.option("--out", type=str, default=None, help="Output directory (overrides config)."),
    click.option("--seed", type=int, default=None, help="Seed (overrides config)."),
    click.option("--threads", type=int, default=None, help="Worker threads (overrides config)."),
]


def common_options(fn):
    for option in reversed(_common):
        fn = option(fn)
    return fn


def _apply_common(doc: dict, out: str | None, seed: int | None, threads: int | None) -> dict:
    if out is not None:
        doc["out_dir"] = out
    if seed is not None:
        doc["seed"] = seed
    if threads is not None:
        doc["threads"] = threads
    return doc


@click.group()
@click.version_option(version=__version__, prog_name="oodkit")
@click.option("--server", type=str, default=None, envvar="OODKIT_SERVER",
              help="Base URL of a running service; default runs in-process.")
@click.pass_context
def main(ctx: click.Context, server: str | None) -> None:
    """Out-of-distribution detection toolkit for one-stage detectors."""
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    # one line per request adds nothing over our own progress logs
    logging.getLogger("httpx").setLevel(logging.WARNING)
    ctx.obj = server


@main.command()
@common_options
@click.option("--manifest", type=str, default=None, help="Fit manifest path.")
@click.option("--bank", type=str, default=None, help="Where to write bank.json.")
@click.option("--distance", type=click.Choice(["l1", "l2", "cosine"]), default=None)
@click.option("--cluster", type=click.Choice(["one", "kmeans", "kmeans_forced", "density"]),
              default=None)
@click.option("--sdr/--no-sdr", "sdr", default=None, help="Toggle dimensionality reduction.")
@click.pass_obj
def fit(server, config_path, out, seed, threads, manifest, bank, distance, cluster, sdr):
    """Fit a centroid bank and calibrate logits thresholds."""
    doc = _apply_common(_load_doc(config_path), out, seed, threads)
    if manifest is not None:
        doc["fit_manifest"] = manifest
    if bank is not None:
        doc["bank_path"] = bank
    if distance is not None:
        doc["distance"] = distance
    if cluster is not None:
        doc.setdefault("cluster", {})["method"] = cluster
    if sdr is True:
        doc.setdefault("sdr", doc.get("sdr") or {})
    elif sdr is False:
        doc["sdr"] = None
    _finish(Client(server).post("/fit", {"config": doc}))


@main.command(name="eval")
@common_options
@click.option("--manifest", "manifests", type=str, multiple=True,
              help="Eval manifest path (repeatable).")
@click.option("--bank", type=str, default=None, help="Bank path (default <out>/bank.json).")
@click.option("--method", type=str, default=None,
              help="fmap|msp|energy|odin or fusion:STRATEGY:A+B.")
@click.option("--eul/--no-eul", "eul", default=None, help="Toggle unknown proposal mining.")
@click.pass_obj
def evaluate(server, config_path, out, seed, threads, manifests, bank, method, eul):
    """Evaluate a fitted bank over manifests at every confidence threshold."""
    doc = _apply_common(_load_doc(config_path), out, seed, threads)
    if manifests:
        doc["eval_manifests"] = list(manifests)
    if bank is not None:
        doc["bank_path"] = bank
    if method is not None:
        doc["method"] = _parse_method(method)
    if eul is True:
        doc.setdefault("eul", doc.get("eul") or {})
    elif eul is False:
        doc["eul"] = None
    _finish(Client(server).post("/eval", {"config": doc}))


@main.command()
@common_options
@click.pass_obj
def sweep(server, config_path, out, seed, threads):
    """Run every configured entry x confidence threshold; write sweep.csv
    and the non-dominated front.csv."""
    doc = _apply_common(_load_doc(config_path), out, seed, threads)
    resp = Client(server).post("/sweep", {"config": doc})
    if resp.status_code == 200 and resp.json().get("all_failed"):
        click.echo(json.dumps(resp.json(), indent=2, sort_keys=True))
        _fail("every sweep row failed", code=1)
    _finish(resp)


@main.command()
@click.option("--config", "config_path", type=str, default=None, help="JSON synth config.")
@click.option("--out", type=str, required=True, help="Dataset output directory.")
@click.option("--seed", type=int, default=None)
@click.pass_obj
def synth(server, config_path, out, seed):
    """Generate a synthetic dataset (kind: objects | eul-scenes)."""
    doc = _load_doc(config_path)
    doc.setdefault("kind", "objects")
    if seed is not None:
        doc["seed"] = seed
    _finish(Client(server).post("/synth", {"out": out, "config": doc}))


@main.command()
@click.option("--host", type=str, default="127.0.0.1")
@click.option("--port", type=int, default=8000)
def serve(host: str, port: int) -> None:
    """Run the HTTP service."""
    import uvicorn

    from oodkit.service.app import app

    uvicorn.run(app, host=host, port=port)


if __name__ == "__main__":
    main()
