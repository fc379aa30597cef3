"""Command line: extract --model ... --checkpoints ... --layers ... --out ..."""

import click

from .jobs import ExtractionError, ExtractionJob
from .run import extract


@click.command()
@click.option("--model", required=True, help="Hub path or local model directory.")
@click.option(
    "--checkpoints",
    default="main",
    show_default=True,
    help="Comma-separated revisions (hub) or subdirectories (local).",
)
@click.option("--layers", required=True, help="Comma-separated hidden-state indices; 0 = embeddings.")
@click.option("--corpus", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--spans", type=click.Path(exists=True, dir_okay=False), help="Span JSON; implies --pooling spans.")
@click.option("--pooling", type=click.Choice(["none", "spans"]), default=None)
@click.option("--expect-ids", type=click.Path(exists=True, dir_okay=False), help="Gold element ids, one per line.")
@click.option("--out", required=True, type=click.Path(file_okay=False))
@click.option("--device", default="cpu", show_default=True)
@click.version_option(package_name="extractor")
def main(model, checkpoints, layers, corpus, spans, pooling, expect_ids, out, device):
    """Dump per-layer hidden states into .act files plus a manifest."""
    try:
        layer_list = [int(x) for x in layers.split(",") if x.strip() != ""]
    except ValueError:
        raise click.ClickException(f"layers must be integers, got {layers!r}")
    if pooling is None:
        pooling = "spans" if spans else "none"
    try:
        job = ExtractionJob(
            model=model,
            checkpoints=[c.strip() for c in checkpoints.split(",") if c.strip()],
            layers=layer_list,
            corpus=corpus,
            out_dir=out,
            pooling=pooling,
            spans_path=spans,
            expect_ids_path=expect_ids,
            device=device,
        )
        manifest = extract(job)
    except ExtractionError as exc:
        raise click.ClickException(str(exc))
    for entry in manifest["files"]:
        click.echo(
            f"{entry['checkpoint']} layer {entry['layer']}: "
            f"{entry['rows']} x {entry['width']} -> {entry['path']}"
        )
    click.echo(f"{len(manifest['files'])} files in {out}")


if __name__ == "__main__":
    main()
