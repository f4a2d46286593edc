import logging
import sys
from pathlib import Path

from layout_guidance.config import deep_merge, load_defaults, read_json, setup_logging
from layout_guidance.errors import LayoutGuidanceError
from layout_guidance.pipeline import load_run_config, run_pipeline


def run_single(config_path: Path) -> int:
    """Run one pipeline from a config file and print where the artifacts went"""
    try:
        logging.info(f"Loading config from {config_path}")
        config = deep_merge(load_defaults(), read_json(config_path))
        run_config = load_run_config(config)

        logging.info(f"Running pipeline into {run_config.output_dir}")
        report = run_pipeline(run_config)

        print("\nLayout-guided sampling results:")
        print(f"Prompt: {report.prompt}")
        print(f"ROI similarity: {report.roi_similarity:.4f}")
        print(f"Box adherence: {report.box_adherence:.4f}")
        print("\nGuidance scores (last step):")
        for term, summary in report.trace_summary.items():
            print(f"{term}: {summary['last_score']:.4f}")

        print(f"\nDetailed results saved in: {Path(report.images[0]).parent}/")
        print("Generated files:")
        for name in [report.images[0], report.layout, report.trace, report.trace_plot]:
            if name:
                print(f"- {Path(name).name}")
        return 0

    except LayoutGuidanceError as e:
        logging.error(f"[{e.module}] {e}")
        return e.exit_code

    except Exception as e:
        logging.error(f"Error running pipeline: {str(e)}")
        raise


def main():
    setup_logging(Path('runs/logs'))
    config_path = Path(sys.argv[1]) if len(sys.argv) > 1 else Path('run.json')
    sys.exit(run_single(config_path))


if __name__ == "__main__":
    main()
