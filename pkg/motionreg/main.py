from typing import Optional, Sequence
import logging
import sys

import click
import typer

from motionreg.cli import data, diagnostics, model
from motionreg.core.config import settings
from motionreg.core.errors import ComputationError, ConfigError, MotionRegError
from motionreg.core.logging import configure_logging
from motionreg.services.engine import configure_runtime

logger = logging.getLogger(__name__)

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERICAL = 0, 1, 2, 3

# click exception names, matched by name across vendored copies of click
USAGE_ERRORS = ("UsageError", "Abort")

app = typer.Typer(
    name=settings.APP_NAME,
    help="Volumetric deformable registration by neighborhood-attention motion decomposition.",
    no_args_is_help=True,
    pretty_exceptions_enable=False,
)

# Include the command groups
data.add_commands(app)
model.add_commands(app)
diagnostics.add_commands(app)


def _is_usage_error(e: BaseException) -> bool:
    if isinstance(e, (click.exceptions.UsageError, click.exceptions.Abort)):
        return True
    return any(cls.__name__ in USAGE_ERRORS for cls in type(e).__mro__)


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Run the CLI and map failures to exit codes.

    Returns:
        0 on success, 1 for usage and configuration errors, 2 for unreadable or invalid
        data, 3 for numerical failures.
    """
    configure_logging(settings)
    configure_runtime(settings)
    args = list(sys.argv[1:] if argv is None else argv)
    try:
        result = app(args=args, prog_name=settings.APP_NAME, standalone_mode=False)
        return result if isinstance(result, int) else EXIT_OK
    except ConfigError as e:
        logger.error(f"Configuration error: {e}")
        return EXIT_USAGE
    except ComputationError as e:
        logger.error(f"Numerical failure: {e}")
        return EXIT_NUMERICAL
    except (MotionRegError, FileNotFoundError) as e:
        logger.error(f"Invalid data: {e}")
        return EXIT_DATA
    except Exception as e:
        if _is_usage_error(e):
            if hasattr(e, "show"):
                e.show()
            else:
                logger.error("Aborted")
            return EXIT_USAGE
        # Don't dump tracebacks in production unless DEBUG is set
        logger.error(f"Unhandled error: {e}", exc_info=settings.DEBUG or settings.ENV != "production")
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
