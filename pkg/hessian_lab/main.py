import logging

from dotenv import load_dotenv

from app.config import get_settings

# Load environment variables
load_dotenv()

settings = get_settings()
settings.output_dir.mkdir(parents=True, exist_ok=True)

# Configure logging
logging.basicConfig(
    level=getattr(logging, settings.log_level.upper(), logging.INFO),
    format="%(asctime)s - %(levelname)s - %(message)s",
    handlers=[
        logging.FileHandler(settings.output_dir / "hessian_lab.log"),
        logging.StreamHandler(),
    ],
)
logger = logging.getLogger(__name__)

from app.cli import cli  # noqa: E402

if __name__ == "__main__":
    logger.info(f"🚀 hessian_lab starting ({settings.workers} workers, output in {settings.output_dir})")
    cli()
