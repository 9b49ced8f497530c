"""Fitting API routes"""
import numpy as np
from fastapi import APIRouter, HTTPException

from app.errors import NumericalError
from app.models import ChainSummary, FitPointsRequest
from app.services.fitting import get_fit_service
from app.services.images import OrientedPointCloud

router = APIRouter(prefix="/fit", tags=["fit"])


@router.post("/points", response_model=ChainSummary)
def fit_points(request: FitPointsRequest):
    """Fit a single shape to a point cloud"""
    try:
        service = get_fit_service()
        cloud = OrientedPointCloud(
            points=np.asarray(request.points, dtype=float),
            theta=None if request.theta is None else np.asarray(request.theta, dtype=float),
        )
        result = service.fit_points(cloud, request.spec, request.prior, request.mcmc)
        return result.summary
    except ValueError as e:
        raise HTTPException(status_code=400, detail=str(e))
    except NumericalError as e:
        raise HTTPException(status_code=422, detail=str(e))
    except Exception as e:
        raise HTTPException(status_code=500, detail=str(e))
