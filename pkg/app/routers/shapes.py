"""Shape process API routes"""
from fastapi import APIRouter, HTTPException
from fastapi.responses import Response

from app.models import (
    CentralRequest,
    PolygonModel,
    RenderRequest,
    SampleRequest,
    SampleResponse,
    TrajectoryModel,
)
from app.services.fitting import get_fit_service

router = APIRouter(prefix="/shapes", tags=["shapes"])


@router.post("/sample", response_model=SampleResponse)
async def sample_shapes(request: SampleRequest):
    """Draw shapes from the random shape process"""
    try:
        service = get_fit_service()
        trajectories = service.sample(request.spec, request.count, request.seed)
        return SampleResponse(
            seed=request.seed,
            trajectories=[
                TrajectoryModel(
                    m=t.m.tolist(),
                    deformations=[d.tolist() for d in t.deformations],
                    polygons=[PolygonModel.from_polygon(c) for c in t.polygons],
                )
                for t in trajectories
            ],
        )
    except ValueError as e:
        raise HTTPException(status_code=400, detail=str(e))
    except Exception as e:
        raise HTTPException(status_code=500, detail=str(e))


@router.post("/central", response_model=PolygonModel)
async def central_shape(request: CentralRequest):
    """Get the central shape of a spec"""
    try:
        service = get_fit_service()
        return PolygonModel.from_polygon(service.central(request.spec))
    except ValueError as e:
        raise HTTPException(status_code=400, detail=str(e))
    except Exception as e:
        raise HTTPException(status_code=500, detail=str(e))


@router.post("/render")
async def render_polygon(request: RenderRequest):
    """Render a polygon as SVG"""
    try:
        service = get_fit_service()
        svg = service.render([request.polygon.to_polygon()], samples=request.samples)
        return Response(content=svg, media_type="image/svg+xml")
    except ValueError as e:
        raise HTTPException(status_code=400, detail=str(e))
    except Exception as e:
        raise HTTPException(status_code=500, detail=str(e))
