"""Command-line wrapper: vrf-extract --job job.json"""

import sys
from pathlib import Path

import click

from .extract import extract
from .job import ExtractionJob


@click.command()
@click.option("--job", "job_path", required=True,
              type=click.Path(exists=True, dir_okay=False, path_type=Path),
              help="Extraction job JSON; paths inside are relative to it.")
def cli(job_path):
    """Export model features/logits for one dataset split."""
    job = ExtractionJob.from_json(job_path)
    summary = extract(job)
    click.echo(f"extracted {summary['n']} rows for split {summary['split']!r} "
               f"({summary['num_classes']} classes, feature dims "
               f"zs={summary['feature_dims']['zs']} ft={summary['feature_dims']['ft']})")
    click.echo(f"manifest: {summary['manifest']}")


def main():
    try:
        cli.main(standalone_mode=True)
    except (ValueError, FileNotFoundError) as e:
        click.echo(f"error: {e}", err=True)
        sys.exit(3)
    except Exception as e:
        click.echo(f"internal error: {e!r}", err=True)
        sys.exit(4)


if __name__ == "__main__":
    main()
