from posefield.core.logging import setup_logging
from scripts.smoke_bench import run as run_bench
from scripts.smoke_cli import run as run_cli
from scripts.smoke_pipeline import run as run_pipeline
from scripts.smoke_worker_batch import run as run_worker_batch


def run() -> None:
    setup_logging()

    print("RUN_SMOKE_PIPELINE")
    run_pipeline()

    print("RUN_SMOKE_WORKER_BATCH")
    run_worker_batch()

    print("RUN_SMOKE_BENCH")
    run_bench()

    print("RUN_SMOKE_CLI")
    run_cli()

    print("SMOKE_ALL_OK")


if __name__ == "__main__":
    run()
