"""Operator command line: serve, train, score, ingest, report, keys, eval."""

from __future__ import annotations

import csv
import json
import sys
from pathlib import Path

import click
import yaml

from . import domain
from .artifacts import load_artifact, save_artifact
from .auth import ApiKey
from .datasets import load_essays, load_labeled
from .evaluation import (
    LatencyProfile,
    QwkReport,
    builtin_trainer,
    latency_profile,
    loocv_by_prompt,
    qwk,
    star_rating,
    tradeoff_report,
)
from .registry import Registry, load_config
from .runs import RunManager, RunRequest
from .server import build_components, create_app
from .store import Workspace
from .training import TrainConfig, train_builtin


def _workspace_for(config_path: str) -> tuple[Workspace, "Registry"]:
    config = load_config(config_path)
    registry = Registry(config)
    extras = dict(config.extras.get("server") or {})
    store_path = extras.get("store_path", "workspace.db")
    if store_path != ":memory:" and not Path(store_path).is_absolute():
        store_path = str(config.base_dir / store_path)
    return Workspace(store_path, schema=config.schema), registry


@click.group()
def cli():
    """Multi-trait essay scoring platform."""


@cli.command()
@click.option("--config", "config_path", required=True, type=click.Path(exists=True))
@click.option("--listen", default="127.0.0.1:8000", show_default=True, help="host:port")
def serve(config_path, listen):
    """Start the scoring server."""
    import uvicorn

    components = build_components(config_path)
    if components.bootstrap_secret:
        click.echo(f"bootstrap admin key (shown once): {components.bootstrap_secret}")
    app = create_app(components)
    host, _, port = listen.partition(":")
    uvicorn.run(app, host=host or "127.0.0.1", port=int(port or 8000))


@cli.command()
@click.option("--data", "data_path", required=True, type=click.Path(exists=True))
@click.option("--out", "out_path", required=True, type=click.Path())
@click.option("--kind", type=click.Choice(["builtin_linear", "builtin_mlp"]), default="builtin_linear", show_default=True)
@click.option("--model-id", default="builtin", show_default=True)
@click.option("--tau", default=0.5, show_default=True, help="feature selection threshold")
@click.option("--ridge-lambda", default=1.0, show_default=True)
@click.option("--epochs", default=50, show_default=True)
@click.option("--seed", default=0, show_default=True)
def train(data_path, out_path, kind, model_id, tau, ridge_lambda, epochs, seed):
    """Train a builtin scorer on a labeled corpus and write the artifact."""
    dataset = load_labeled(data_path)
    config = TrainConfig(
        kind=kind,
        selection_threshold=tau,
        ridge_lambda=ridge_lambda,
        epochs=epochs,
        seed=seed,
    )
    artifact = train_builtin(dataset, config, model_id=model_id)
    save_artifact(artifact, out_path)
    click.echo(
        f"trained {kind} on {len(dataset)} essays "
        f"({artifact.mask.n_retained}/{len(artifact.mask.retained)} features retained) -> {out_path}"
    )


@cli.command()
@click.option("--config", "config_path", required=True, type=click.Path(exists=True))
@click.option("--in", "in_path", required=True, type=click.Path(exists=True))
@click.option("--traits", required=True, help="comma-separated trait names, e.g. DEV,REL")
@click.option("--model", "model_id", default=None, help="model id (default: per-trait defaults)")
@click.option("--out", "out_path", required=True, type=click.Path())
def score(config_path, in_path, traits, model_id, out_path):
    """Score a CSV/JSONL of essays offline and write a scores CSV."""
    config = load_config(config_path)
    registry = Registry(config)
    store = Workspace(":memory:", schema=config.schema)
    manager = RunManager(store, registry, worker_budget=4)
    try:
        essays = load_essays(in_path)
        trait_list = tuple(t.strip() for t in traits.split(",") if t.strip())
        overrides = tuple((t, model_id) for t in trait_list) if model_id else ()
        run_id = manager.create_run(
            RunRequest(traits=trait_list, inline_essays=tuple(essays), model_overrides=overrides),
            "cli",
        )
        run = manager.wait(run_id, timeout=3600)
        with open(out_path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["essay_id", "trait", "value", "raw_value", "model_id", "elapsed_ms"])
            for s in sorted(run.results, key=lambda s: (s.essay_id, s.trait)):
                writer.writerow([s.essay_id, s.trait, s.value, f"{s.raw_value:.6f}", s.model_id, s.elapsed_ms])
        click.echo(f"run {run_id}: {run.state}, {len(run.results)} scores -> {out_path}")
        if run.failures:
            click.echo(f"{len(run.failures)} failures:", err=True)
            for f in run.failures:
                click.echo(f"  {f.essay_id}/{f.trait}: {f.reason}", err=True)
    finally:
        manager.shutdown()
        store.close()


@cli.command()
@click.option("--config", "config_path", required=True, type=click.Path(exists=True))
@click.option("--assignment", "assignment_id", required=True)
@click.option("--file", "file_path", required=True, type=click.Path(exists=True))
@click.option("--format", "fmt", type=click.Choice(["csv", "jsonl"]), default=None)
def ingest(config_path, assignment_id, file_path, fmt):
    """Batch-upload essays into a stored assignment."""
    store, _ = _workspace_for(config_path)
    try:
        if fmt is None:
            fmt = "jsonl" if Path(file_path).suffix.lower() in (".jsonl", ".ndjson") else "csv"
        result = store.ingest_batch(Path(file_path).read_bytes(), fmt, assignment_id)
        click.echo(f"batch {result.batch_id}: accepted {result.accepted}, rejected {len(result.rejects)}")
        for line, reason in result.rejects:
            click.echo(f"  line {line}: {reason}", err=True)
    finally:
        store.close()


@cli.command()
@click.option("--config", "config_path", required=True, type=click.Path(exists=True))
@click.option("--assignment", "assignment_id", required=True)
@click.option("--out", "out_path", required=True, type=click.Path())
@click.option("--text", "as_text", is_flag=True, help="write the printable rendering instead of JSON")
def report(config_path, assignment_id, out_path, as_text):
    """Generate the finalized-score report for an assignment."""
    store, _ = _workspace_for(config_path)
    try:
        document = store.generate_report(assignment_id)
        if as_text:
            Path(out_path).write_text(document.to_text(), encoding="utf-8")
        else:
            Path(out_path).write_bytes(document.to_json_bytes())
        click.echo(f"report for {assignment_id} -> {out_path}")
    finally:
        store.close()


# ---------------------------------------------------------------------------
# keys
# ---------------------------------------------------------------------------


@cli.group()
def keys():
    """API key administration."""


@keys.command("issue")
@click.option("--config", "config_path", required=True, type=click.Path(exists=True))
@click.option("--owner", required=True)
@click.option("--limit", default=60, show_default=True)
@click.option("--scopes", default="score,read", show_default=True)
def keys_issue(config_path, owner, limit, scopes):
    store, _ = _workspace_for(config_path)
    try:
        from .auth import KeyManager

        km = KeyManager(
            persist=lambda key: store.put_entity("key", key.key_id, key.to_dict(), expected_version=-1)
        )
        km.load(ApiKey.from_dict(r.payload) for r in store.list_entities("key"))
        key, secret = km.issue_key(owner, [s.strip() for s in scopes.split(",")], limit)
        click.echo(f"key_id: {key.key_id}")
        click.echo(f"secret (shown once): {secret}")
    finally:
        store.close()


@keys.command("revoke")
@click.option("--config", "config_path", required=True, type=click.Path(exists=True))
@click.argument("key_id")
def keys_revoke(config_path, key_id):
    store, _ = _workspace_for(config_path)
    try:
        from .auth import KeyManager

        km = KeyManager(
            persist=lambda key: store.put_entity("key", key.key_id, key.to_dict(), expected_version=-1)
        )
        km.load(ApiKey.from_dict(r.payload) for r in store.list_entities("key"))
        km.revoke_key(key_id)
        click.echo(f"revoked {key_id}")
    finally:
        store.close()


@keys.command("list")
@click.option("--config", "config_path", required=True, type=click.Path(exists=True))
def keys_list(config_path):
    store, _ = _workspace_for(config_path)
    try:
        for record in store.list_entities("key"):
            k = record.payload
            flag = " (revoked)" if k["revoked"] else ""
            click.echo(f"{k['key_id']}  owner={k['owner']}  scopes={','.join(k['scopes'])}  limit={k['rate_limit']}/min{flag}")
    finally:
        store.close()


# ---------------------------------------------------------------------------
# runs
# ---------------------------------------------------------------------------


@cli.group()
def runs():
    """Run history administration."""


@runs.command("purge")
@click.option("--config", "config_path", required=True, type=click.Path(exists=True))
@click.argument("run_id")
def runs_purge(config_path, run_id):
    """Hard-delete a tombstoned run's rows (admin action)."""
    store, _ = _workspace_for(config_path)
    try:
        store.purge_run(run_id)
        click.echo(f"purged {run_id}")
    finally:
        store.close()


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------


@cli.group("eval")
def eval_group():
    """Evaluation harness: qwk, loocv, latency, tradeoff."""


@eval_group.command("qwk")
@click.option("--data", "data_path", required=True, type=click.Path(exists=True))
@click.option("--col-a", default="rater_a", show_default=True)
@click.option("--col-b", default="rater_b", show_default=True)
@click.option("--trait", default=None, help="take the range from a built-in trait")
@click.option("--min", "lo", type=int, default=None)
@click.option("--max", "hi", type=int, default=None)
def eval_qwk(data_path, col_a, col_b, trait, lo, hi):
    """Quadratic weighted kappa between two integer columns of a CSV."""
    if trait:
        lo, hi = domain.trait_range(trait)
    if lo is None or hi is None:
        raise click.UsageError("provide --trait or both --min and --max")
    with open(data_path, encoding="utf-8-sig", newline="") as fh:
        rows = list(csv.DictReader(fh))
    a = [int(r[col_a]) for r in rows]
    b = [int(r[col_b]) for r in rows]
    click.echo(f"qwk = {qwk(a, b, (lo, hi)):.6f}  (n={len(a)}, range=[{lo},{hi}])")


@eval_group.command("loocv")
@click.option("--data", "data_path", required=True, type=click.Path(exists=True))
@click.option("--config", "hp_path", type=click.Path(exists=True), default=None,
              help="YAML/JSON with {kind, grid: [{tau, ridge_lambda, ...}, ...]}")
@click.option("--out", "out_path", required=True, type=click.Path())
@click.option("--model-id", default="builtin", show_default=True)
def eval_loocv(data_path, hp_path, out_path, model_id):
    """Leave-one-prompt-out cross-validation over a labeled corpus."""
    dataset = load_labeled(data_path)
    grid = [TrainConfig(kind="builtin_linear", selection_threshold=0.3)]
    if hp_path:
        spec = yaml.safe_load(Path(hp_path).read_text(encoding="utf-8")) or {}
        kind = spec.get("kind", "builtin_linear")
        grid = [
            TrainConfig(kind=kind, **{
                {"tau": "selection_threshold"}.get(k, k): v for k, v in entry.items()
            })
            for entry in spec.get("grid", [{}])
        ]
    report_obj = loocv_by_prompt(dataset, builtin_trainer(), grid, model_id=model_id)
    Path(out_path).write_text(report_obj.to_json(), encoding="utf-8")
    click.echo(report_obj.to_table_text())
    click.echo(f"report -> {out_path}  (stars: {star_rating(report_obj.avg[model_id])})")


@eval_group.command("latency")
@click.option("--config", "config_path", required=True, type=click.Path(exists=True))
@click.option("--model", "model_id", required=True)
@click.option("--data", "data_path", required=True, type=click.Path(exists=True))
@click.option("--trait", default="HOL", show_default=True)
@click.option("--warmup", default=3, show_default=True)
@click.option("--out", "out_path", default=None, type=click.Path())
def eval_latency(config_path, model_id, data_path, trait, warmup, out_path):
    """Per-essay wall-clock profile of one model."""
    config = load_config(config_path)
    registry = Registry(config)
    essays = load_essays(data_path)
    handle = registry.get_model(model_id)
    profile = latency_profile(handle, essays, trait, warmup=warmup, schema=config.schema)
    click.echo(
        f"{model_id}: mean {profile.mean_ms:.2f} ms, median {profile.median_ms:.2f} ms, "
        f"p95 {profile.p95_ms:.2f} ms over {profile.essay_count} essays"
    )
    if out_path:
        Path(out_path).write_text(json.dumps(profile.to_dict(), indent=2), encoding="utf-8")


@eval_group.command("tradeoff")
@click.option("--qwk", "qwk_path", required=True, type=click.Path(exists=True),
              help="QWK report JSON (from eval loocv)")
@click.option("--latency", "latency_paths", multiple=True, type=click.Path(exists=True),
              help="latency profile JSON (repeatable)")
@click.option("--out", "out_path", default=None, type=click.Path())
def eval_tradeoff(qwk_path, latency_paths, out_path):
    """Effectiveness vs efficiency table across models."""
    report_obj = QwkReport.from_dict(json.loads(Path(qwk_path).read_text(encoding="utf-8")))
    profiles = {}
    for p in latency_paths:
        d = json.loads(Path(p).read_text(encoding="utf-8"))
        profiles[d["model_id"]] = LatencyProfile(**d)
    table = tradeoff_report(report_obj, profiles)
    click.echo(table.to_text())
    if out_path:
        Path(out_path).write_text(table.to_json(), encoding="utf-8")


# ---------------------------------------------------------------------------
# init: runnable demo workspace
# ---------------------------------------------------------------------------


@cli.command()
@click.option("--dir", "target_dir", required=True, type=click.Path())
@click.option("--essays", default=60, show_default=True, help="synthetic corpus size")
@click.option("--seed", default=7, show_default=True)
def init(target_dir, essays, seed):
    """Create a runnable demo workspace: synthetic corpus, trained artifact,
    config file, and a labeled dataset for the eval commands."""
    import numpy as np

    target = Path(target_dir)
    target.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    words = ["كتب", "قرأ", "درس", "فهم", "شرح", "علم", "نظر", "بحث", "سأل", "وجد"]
    components = list(domain.DEFAULT_SCHEMA.component_traits)
    rows = []
    lengths = np.linspace(8, 60, essays).astype(int)
    for i, length in enumerate(lengths):
        text = " ".join(rng.choice(words, size=int(length))) + "."
        frac = (length - 8) / (60 - 8)
        row = {
            "essay_id": f"demo-{i}",
            "prompt_id": f"p{i % 2 + 1}",
            "text": text,
        }
        for trait in components:
            lo, hi = domain.trait_range(trait)
            row[trait] = int(round(lo + frac * (hi - lo)))
        rows.append(row)
    data_path = target / "demo-corpus.csv"
    with open(data_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
        writer.writeheader()
        writer.writerows(rows)

    dataset = load_labeled(data_path)
    artifact = train_builtin(
        dataset,
        TrainConfig(kind="builtin_linear", selection_threshold=0.3, seed=seed),
        model_id="builtin-linear",
    )
    artifact_path = target / "builtin-linear.qym"
    save_artifact(artifact, str(artifact_path))

    all_traits = list(domain.TRAIT_ORDER)
    config = {
        "languages": ["arabic", "english"],
        "grade_levels": ["10", "11", "12"],
        "essay_types": ["persuasive", "explanatory", "argumentative"],
        "models": [
            {
                "id": "builtin-linear",
                "display_name": "Builtin linear scorer",
                "description": "Feature-based ridge regression over handcrafted text features",
                "stars": 3,
                "kind": "builtin_linear",
                "supported_traits": all_traits,
                "load_policy": "eager",
                "enabled": True,
                "artifact_path": "builtin-linear.qym",
                "default_for": all_traits,
            }
        ],
        "server": {"store_path": "workspace.db", "run_workers": 4},
    }
    config_path = target / "config.yaml"
    config_path.write_text(yaml.safe_dump(config, allow_unicode=True, sort_keys=False), encoding="utf-8")
    click.echo(f"demo workspace ready in {target}")
    click.echo(f"  corpus:   {data_path}")
    click.echo(f"  artifact: {artifact_path}")
    click.echo(f"  config:   {config_path}")
    click.echo(f"start with: traitmark serve --config {config_path}")


if __name__ == "__main__":
    cli()
