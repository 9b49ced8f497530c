"""RothFit - FastAPI Application"""
import logging
from contextlib import asynccontextmanager

from fastapi import FastAPI
from fastapi.middleware.cors import CORSMiddleware

from app import __version__
from app.config import settings
from app.routers import fit, shapes

logger = logging.getLogger(__name__)


def configure_logging(level: str = None) -> None:
    """Configure the root logger once"""
    logging.basicConfig(
        level=(level or settings.log_level).upper(),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )


@asynccontextmanager
async def lifespan(app: FastAPI):
    """Application lifespan handler"""
    configure_logging()
    logger.info("Starting RothFit %s", __version__)
    logger.info("Output directory: %s", settings.get_output_dir())
    logger.info("Griddy grid size: %d, quadrature nodes: %d", settings.griddy_grid_size, settings.quadrature_nodes)

    yield

    logger.info("Shutting down RothFit...")


app = FastAPI(
    title="RothFit - Multiscale Closed-Curve Shape Models",
    description="Roth curve shape process sampling and Bayesian fitting of point clouds and images",
    version=__version__,
    lifespan=lifespan,
)

# CORS middleware
app.add_middleware(
    CORSMiddleware,
    allow_origins=["*"],
    allow_credentials=True,
    allow_methods=["*"],
    allow_headers=["*"],
)

# Include routers
app.include_router(shapes.router)
app.include_router(fit.router)


@app.get("/")
async def root():
    """Root endpoint"""
    return {
        "name": "RothFit",
        "version": __version__,
        "description": "Multiscale closed-curve shape models",
        "docs": "/docs",
    }


@app.get("/health")
async def health_check():
    """Health check endpoint"""
    return {
        "status": "healthy",
        "output_dir": str(settings.get_output_dir()),
    }


if __name__ == "__main__":
    import uvicorn

    uvicorn.run(
        "app.main:app",
        host=settings.host,
        port=settings.port,
        reload=settings.debug,
    )
