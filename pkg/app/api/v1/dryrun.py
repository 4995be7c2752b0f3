from fastapi import APIRouter, HTTPException, status

from app.core.exceptions import ParameterError
from app.dictpfl.netsim import LayerShape, dry_run_accounting
from app.schemas.schemas import DryRunRequest, DryRunResponse, StrategyCostResponse

router = APIRouter()


@router.post("", response_model=DryRunResponse)
async def dry_run(request: DryRunRequest):
    """Analytic per-strategy upload cost for a list of layer shapes"""
    manifest = [LayerShape(layer.name, layer.n, layer.m) for layer in request.layers]
    try:
        costs = dry_run_accounting(
            manifest,
            rank=request.rank,
            s=request.prune,
            top_k=request.top_k,
            sae_fraction=request.sae_fraction
        )
    except ParameterError as exc:
        raise HTTPException(
            status_code=status.HTTP_422_UNPROCESSABLE_ENTITY,
            detail=str(exc)
        )

    full, ours = costs["full"], costs["dictpfl"]
    return DryRunResponse(
        costs=[StrategyCostResponse(**cost.as_row()) for cost in costs.values()],
        reduction_elements=full.encrypted_elements / max(ours.encrypted_elements, 1),
        reduction_bytes=full.ciphertext_bytes / max(ours.ciphertext_bytes, 1),
    )
