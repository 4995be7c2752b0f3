from fastapi import APIRouter, Depends, HTTPException, status, Query, Response
from sqlalchemy.orm import Session
from typing import Optional, List
import logging

from app.core.database import get_db
from app.core.exceptions import DictPFLError, ParameterError, ShapeError
from app.dictpfl.protocol import METRICS_HEADER, RoundMetrics, metrics_csv, simulate
from app.models.models import Run, RunStatus
from app.repositories.run_repository import RunRepository
from app.schemas.schemas import RoundMetricsResponse, RunConfig, RunResponse, Strategy

logger = logging.getLogger(__name__)

router = APIRouter()


def get_run_or_404(run_id: int, db: Session) -> Run:
    run = RunRepository(db).get_by_id(run_id)
    if not run:
        raise HTTPException(
            status_code=status.HTTP_404_NOT_FOUND,
            detail="Run not found"
        )
    return run


def execute_run(config: RunConfig, run_repo: RunRepository) -> Run:
    try:
        rows, summary = simulate(config)
    except (ParameterError, ShapeError, FileNotFoundError) as exc:
        raise HTTPException(
            status_code=status.HTTP_422_UNPROCESSABLE_ENTITY,
            detail=str(exc)
        )
    except DictPFLError as exc:
        logger.error("run aborted: %s", exc)
        run_repo.create(config, error=str(exc))
        raise HTTPException(
            status_code=status.HTTP_409_CONFLICT,
            detail=f"Run aborted: {exc}"
        )

    run = run_repo.create(config, summary)
    run_repo.add_rounds(run, rows)
    logger.info("stored run %d (%s, %d rounds)", run.id, run.strategy, len(rows))
    return run


@router.post("", response_model=RunResponse, status_code=status.HTTP_201_CREATED)
def create_run(
    config: RunConfig,
    db: Session = Depends(get_db)
):
    """Run a simulation and store its metrics"""
    return execute_run(config, RunRepository(db))


@router.post("/{run_id}/rerun", response_model=RunResponse, status_code=status.HTTP_201_CREATED)
def rerun(
    run_id: int,
    db: Session = Depends(get_db)
):
    """Repeat a stored run with its exact configuration"""
    run_repo = RunRepository(db)
    config = run_repo.get_config(get_run_or_404(run_id, db))
    return execute_run(config, run_repo)


@router.get("", response_model=List[RunResponse])
async def get_runs(
    strategy: Optional[Strategy] = None,
    status_filter: Optional[RunStatus] = Query(None, alias="status"),
    db: Session = Depends(get_db)
):
    """Get all runs with optional filters"""
    run_repo = RunRepository(db)
    return run_repo.get_all(
        strategy=strategy.value if strategy else None,
        status=status_filter
    )


@router.get("/{run_id}", response_model=RunResponse)
async def get_run(
    run_id: int,
    db: Session = Depends(get_db)
):
    """Get run by ID"""
    return get_run_or_404(run_id, db)


@router.get("/{run_id}/rounds", response_model=List[RoundMetricsResponse])
async def get_run_rounds(
    run_id: int,
    db: Session = Depends(get_db)
):
    """Get per-round metrics of a run"""
    get_run_or_404(run_id, db)
    return RunRepository(db).get_rounds(run_id)


@router.get("/{run_id}/metrics.csv")
async def get_run_metrics_csv(
    run_id: int,
    db: Session = Depends(get_db)
):
    """Per-round metrics in the CLI's CSV format"""
    get_run_or_404(run_id, db)
    records = RunRepository(db).get_rounds(run_id)
    rows = [RoundMetrics(**{name: getattr(record, name) for name in METRICS_HEADER}) for record in records]
    return Response(content=metrics_csv(rows), media_type="text/csv")


@router.delete("/{run_id}", status_code=status.HTTP_204_NO_CONTENT)
async def delete_run(
    run_id: int,
    db: Session = Depends(get_db)
):
    """Delete run and its round records"""
    run = get_run_or_404(run_id, db)
    RunRepository(db).delete(run)
    return None
