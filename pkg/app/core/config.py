from pydantic_settings import BaseSettings, SettingsConfigDict
from dotenv import load_dotenv

load_dotenv()

class Settings(BaseSettings):
    """
    Process-wide defaults. Every value can be overridden from the environment
    or a `.env` file; scenario files and CLI flags override these in turn.
    """
    DATABASE_URL: str = "sqlite:///./ebpool_runs.db"
    RECORD_RUNS: bool = True
    LOG_LEVEL: str = "INFO"

    # Root searches for tau^2 (bisection on a scale-free residual)
    SOLVER_TOL: float = 1e-10
    SOLVER_MAX_ITER: int = 500

    # Functional estimators
    MIN_FIRST_STAGE: float = 0.02
    GRAM_REL_THRESHOLD: float = 1e-8
    POSITIVITY_DELTA: float = 0.01

    # Interval procedures
    DEFAULT_ALPHA: float = 0.1
    SUBSAMPLE_B: int = 500
    SUBSAMPLE_MAX_FAIL_RATE: float = 0.10
    DOMINANCE_THRESHOLD: float = 1.0

    THREADS: int = 1

    model_config = SettingsConfigDict(env_file=".env", extra="ignore")

settings = Settings()
