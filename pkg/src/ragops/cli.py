"""Command-line interface. Subcommands map 1:1 to module operations;
--json switches to machine-readable output. Exit codes: 0 success,
1 operation failure, 2 usage error."""

from __future__ import annotations

import json
import re
import sys

import click

from .app import RagOpsApp
from .config import DeploymentConfig
from .errors import RagOpsError
from .ingestion import NormalizedDocument

_WINDOW_RE = re.compile(r"^(\d+)([smhd])$")
_WINDOW_UNITS = {"s": 1.0, "m": 60.0, "h": 3600.0, "d": 86400.0}


def _parse_window(value: str) -> float:
    m = _WINDOW_RE.match(value.strip())
    if not m:
        raise click.UsageError(f"bad window {value!r}; use e.g. 30m, 24h")
    return int(m.group(1)) * _WINDOW_UNITS[m.group(2)]


def _load_app(ctx) -> RagOpsApp:
    if ctx.obj.get("app") is None:
        path = ctx.obj.get("config_path")
        config = DeploymentConfig.load(path) if path else DeploymentConfig()
        ctx.obj["app"] = RagOpsApp(config)
    return ctx.obj["app"]


def _emit(ctx, data, human: str | None = None) -> None:
    if ctx.obj.get("json") or human is None:
        click.echo(json.dumps(data, sort_keys=True, indent=2, default=str))
    else:
        click.echo(human)


@click.group()
@click.option("--config", "-c", "config_path", envvar="RAGOPS_CONFIG",
              type=click.Path(exists=True), default=None,
              help="Deployment config file (YAML or JSON).")
@click.option("--json", "json_out", is_flag=True, help="Machine-readable output.")
@click.pass_context
def main(ctx, config_path, json_out):
    """Operate a retrieval-augmented generation deployment."""
    ctx.ensure_object(dict)
    ctx.obj["config_path"] = config_path
    ctx.obj["json"] = json_out
    ctx.obj["app"] = None


@main.command()
@click.option("--source", required=True,
              help="Configured source_id or a directory path.")
@click.pass_context
def ingest(ctx, source):
    """Poll a source, verify documents, and apply them to the lake."""
    app = _load_app(ctx)
    summary = app.ingest_source(source)
    _emit(ctx, summary,
          f"polled={summary['polled']} normalized={summary['normalized']} "
          f"quarantined={summary['quarantined']} accepted={summary['accepted']} "
          f"new_versions={summary['new_versions']} "
          f"duplicates={summary['duplicates']} stale={summary['stale']}")


@main.command()
@click.option("--file", "path", required=True, type=click.Path(exists=True),
              help="Normalized document as JSON.")
@click.pass_context
def verify(ctx, path):
    """Run the verification checks without applying anything."""
    app = _load_app(ctx)
    with open(path, encoding="utf-8") as fh:
        body = json.load(fh)
    doc = NormalizedDocument(
        doc_key=body["doc_key"], text=body.get("text", ""),
        metadata=body.get("metadata", {"extra": {}}),
        acl=tuple(body.get("acl", ())), operation=body.get("operation", "add"))
    result = app.verify_only(doc)
    _emit(ctx, result, f"{result['doc_key']}: {result['decision']}")


@main.group()
def review():
    """Conflict ticket review queue."""


@review.command("list")
@click.pass_context
def review_list(ctx):
    app = _load_app(ctx)
    tickets = app.tickets.to_dicts()
    _emit(ctx, tickets, "\n".join(
        f"{t['ticket_id']} {t['status']:18s} {t['doc_key_a']} vs "
        f"{t['doc_key_b']} (sim {t['similarity']:.3f})"
        for t in tickets) or "no tickets")


@review.command("resolve")
@click.argument("ticket_id")
@click.option("--keep", type=click.Choice(["a", "b", "both"]), required=True)
@click.option("--resolver", default="cli")
@click.pass_context
def review_resolve(ctx, ticket_id, keep, resolver):
    app = _load_app(ctx)
    resolution = {"a": "resolved_keep_a", "b": "resolved_keep_b",
                  "both": "resolved_keep_both"}[keep]
    ticket = app.tickets.resolve(ticket_id, resolution, resolver)
    app.save_state()
    _emit(ctx, ticket.to_dict(), f"{ticket_id}: {ticket.status}")


@main.command()
@click.option("--full", is_flag=True, help="Full rebuild instead of incremental.")
@click.pass_context
def reindex(ctx, full):
    """Update the retrieval indexes from the lake change feed."""
    app = _load_app(ctx)
    epoch = app.reindex(full=full)
    _emit(ctx, epoch,
          f"epoch {epoch['epoch']} covering lake_seq "
          f"{epoch['lake_seq_covered']} ({epoch['chunk_count']} chunks)")


@main.command()
@click.option("--level", type=click.Choice(["module", "component", "e2e"]),
              required=True)
@click.option("--suite", required=True, type=click.Path(exists=True))
@click.option("--seed", default=0, type=int)
@click.pass_context
def test(ctx, level, suite, seed):
    """Run an offline test suite and print the metric report."""
    app = _load_app(ctx)
    cases = app.load_suite(suite)
    level_name = {"e2e": "end_to_end"}.get(level, level)
    report = app.run_tests(level_name, cases, seed=seed)
    _emit(ctx, report.to_dict(),
          f"{level_name}: n={report.n_cases} " + " ".join(
              f"{k}={v:.4f}" for k, v in sorted(report.metrics.items())))


@main.command()
@click.option("--axis", default="all",
              type=click.Choice(["all", "query", "retrieval", "generation",
                                 "vocabulary"]))
@click.option("--window", default="24h", help="e.g. 30m, 24h, 7d")
@click.option("--suite", default=None, type=click.Path(exists=True))
@click.pass_context
def coverage(ctx, axis, window, suite):
    """Compare live traffic against the offline test set."""
    app = _load_app(ctx)
    reports = app.coverage_reports(_parse_window(window), suite)
    rows = [r.to_dict() for r in reports
            if axis == "all" or r.axis == axis]
    _emit(ctx, {"reports": rows,
                "alerts": [a.to_dict() for a in app.alerts]},
          "\n".join(f"{r['axis']:11s} score={r['score']} "
                    f"threshold={r['threshold']} breach={r['breach']}"
                    for r in rows))


@main.command()
@click.option("--host", default="127.0.0.1")
@click.option("--port", default=8000, type=int)
@click.pass_context
def serve(ctx, host, port):
    """Run the HTTP service."""
    from .service import serve as run_service

    app = _load_app(ctx)
    run_service(app, host=host, port=port)


@main.group()
def deploy():
    """Live-testing deployments: shadow, A/B, staged."""


def _deploy_start(ctx, strategy, candidate, pct, schedule):
    app = _load_app(ctx)
    stage_schedule = []
    if schedule:
        for part in schedule.split(","):
            step, value = part.split(":")
            stage_schedule.append((int(step), int(value)))
    result = app.deploy(strategy, candidate, ab_pct=pct,
                        stage_schedule=stage_schedule)
    _emit(ctx, result, f"{result['deployment_id']}: {strategy} "
                       f"candidate={candidate} pct={result['current_pct']}")


@deploy.command("shadow")
@click.option("--candidate", required=True)
@click.pass_context
def deploy_shadow(ctx, candidate):
    _deploy_start(ctx, "shadow", candidate, 0, "")


@deploy.command("ab")
@click.option("--candidate", required=True)
@click.option("--pct", required=True, type=int)
@click.pass_context
def deploy_ab(ctx, candidate, pct):
    _deploy_start(ctx, "ab", candidate, pct, "")


@deploy.command("staged")
@click.option("--candidate", required=True)
@click.option("--schedule", required=True,
              help="Comma-separated step:pct pairs, e.g. 1:10,2:50,3:100")
@click.pass_context
def deploy_staged(ctx, candidate, schedule):
    _deploy_start(ctx, "staged", candidate, 0, schedule)


@deploy.command("advance")
@click.pass_context
def deploy_advance(ctx):
    app = _load_app(ctx)
    result = app.advance_deployment()
    _emit(ctx, result, f"{result['deployment_id']}: "
                       f"pct={result['current_pct']} status={result['status']}")


@deploy.command("recall")
@click.option("--reason", required=True)
@click.pass_context
def deploy_recall(ctx, reason):
    app = _load_app(ctx)
    result = app.recall_deployment(reason)
    _emit(ctx, result, f"{result['deployment_id']}: recalled ({reason})")


@deploy.command("report")
@click.pass_context
def deploy_report(ctx):
    """Shadow comparison report for the most recent shadow deployment."""
    app = _load_app(ctx)
    _emit(ctx, app.shadow_report())


@main.command()
@click.argument("trace_id")
@click.pass_context
def trace(ctx, trace_id):
    """Show the span tree of one trace."""
    app = _load_app(ctx)
    tree = app.tracer.trace(trace_id)
    from .service import _span_to_dict

    _emit(ctx, {"trace_id": tree.trace_id,
                "spans": [_span_to_dict(r) for r in tree.roots]},
          "\n".join(tree.operations()))


@main.command()
@click.argument("response_id")
@click.pass_context
def lineage(ctx, response_id):
    """Resolve a response back to chunks and document versions."""
    app = _load_app(ctx)
    graph = app.tracer.lineage(response_id, app.lake)
    _emit(ctx, graph.to_dict(),
          f"{response_id}: {len(graph.chunk_ids)} chunk(s), "
          f"docs {graph.doc_versions}")


@main.group()
def lake():
    """Data lake operations."""


@lake.command("export")
@click.pass_context
def lake_export(ctx):
    """Emit live versions as JSONL."""
    app = _load_app(ctx)
    for line in app.lake.export_jsonl():
        click.echo(line)


@main.command()
@click.argument("question")
@click.option("--role", default=None)
@click.pass_context
def query(ctx, question, role):
    """Answer one query through the full pipeline."""
    app = _load_app(ctx)
    result = app.query(question, role)
    _emit(ctx, result,
          f"{result['answer']}\n  citations: {result['citations']} "
          f"grounded: {result['validation']['grounded']}")


@main.command()
@click.pass_context
def status(ctx):
    """Deployment health: versions, epoch, lake sequence."""
    app = _load_app(ctx)
    health = app.health()
    _emit(ctx, health,
          " ".join(f"{k}={v}" for k, v in sorted(health.items())))


def run(argv=None) -> int:
    """Entry point wrapper mapping errors to exit codes."""
    try:
        main.main(args=argv, standalone_mode=False, obj={})
        return 0
    except click.exceptions.UsageError as exc:
        click.echo(f"usage error: {exc.format_message()}", err=True)
        return 2
    except click.exceptions.Abort:
        return 1
    except click.exceptions.ClickException as exc:
        exc.show()
        return 1
    except RagOpsError as exc:
        click.echo(f"error: {exc}", err=True)
        return 1


if __name__ == "__main__":
    sys.exit(run())
