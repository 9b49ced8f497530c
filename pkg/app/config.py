"""RothFit Configuration"""
from pathlib import Path

from pydantic import Field
from pydantic_settings import BaseSettings


class Settings(BaseSettings):
    """Application settings"""

    # Server
    host: str = Field(default="127.0.0.1", alias="HOST")
    port: int = Field(default=8000, alias="PORT")
    debug: bool = Field(default=False, alias="DEBUG")

    # Logging
    log_level: str = Field(default="INFO", alias="LOG_LEVEL")

    # Geometry kernel
    quadrature_nodes: int = Field(default=2048, alias="QUADRATURE_NODES")
    tangent_tolerance: float = Field(default=1e-12, alias="TANGENT_TOLERANCE")

    # Linear algebra
    eigen_clamp: float = Field(default=1e-12, alias="EIGEN_CLAMP")
    cholesky_jitter: float = Field(default=1e-10, alias="CHOLESKY_JITTER")

    # MCMC defaults
    griddy_grid_size: int = Field(default=256, alias="GRIDDY_GRID_SIZE")
    orientation_in_griddy: bool = Field(default=True, alias="ORIENTATION_IN_GRIDDY")
    center_prior_variance: float = Field(default=1e6, alias="CENTER_PRIOR_VARIANCE")
    default_iterations: int = Field(default=2000, alias="DEFAULT_ITERATIONS")
    default_burnin: int = Field(default=500, alias="DEFAULT_BURNIN")
    default_thin: int = Field(default=1, alias="DEFAULT_THIN")
    default_seed: int = Field(default=0, alias="DEFAULT_SEED")
    default_threads: int = Field(default=1, alias="DEFAULT_THREADS")

    # Output
    output_dir: Path = Field(default=Path("./runs"), alias="OUTPUT_DIR")

    class Config:
        env_file = ".env"
        env_file_encoding = "utf-8"
        case_sensitive = False

    def get_output_dir(self) -> Path:
        """Get absolute path for run outputs"""
        base_dir = Path(__file__).parent.parent
        if self.output_dir.is_absolute():
            return self.output_dir
        return base_dir / self.output_dir


# Global settings instance
settings = Settings()
