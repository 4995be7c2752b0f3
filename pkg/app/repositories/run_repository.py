from dataclasses import asdict
from sqlalchemy.orm import Session
from typing import Optional, List, Sequence
import json

from app.dictpfl.protocol import RoundMetrics, RunSummary
from app.models.models import Run, RoundRecord, RunStatus
from app.schemas.schemas import RunConfig


class RunRepository:
    """Run repository for database operations"""

    def __init__(self, db: Session):
        self.db = db

    def get_by_id(self, run_id: int) -> Optional[Run]:
        """Get run by ID"""
        return self.db.query(Run).filter(Run.id == run_id).first()

    def get_all(
        self,
        strategy: Optional[str] = None,
        status: Optional[RunStatus] = None
    ) -> List[Run]:
        """Get all runs with optional filters"""
        query = self.db.query(Run)

        if strategy is not None:
            query = query.filter(Run.strategy == strategy)

        if status is not None:
            query = query.filter(Run.status == status)

        return query.order_by(Run.created_at.desc(), Run.id.desc()).all()

    def create(self, config: RunConfig, summary: Optional[RunSummary] = None, error: Optional[str] = None) -> Run:
        """Create run from its configuration and summary (or failure message)"""
        run = Run(
            strategy=config.strategy.value,
            backend=config.backend.value,
            status=RunStatus.FAILED if error else RunStatus.COMPLETED,
            rounds=config.rounds,
            clients=config.clients,
            config_json=json.dumps(config.model_dump()),
            error=error[:1000] if error else None,
        )
        if summary is not None:
            run.final_loss = summary.final_loss
            run.final_accuracy = summary.final_accuracy
            run.total_ciphertext_bytes = summary.total_ciphertext_bytes
            run.total_plaintext_bytes = summary.total_plaintext_bytes
            run.total_seconds = summary.total_seconds
            run.rounds_to_target = summary.rounds_to_target
        self.db.add(run)
        self.db.commit()
        self.db.refresh(run)
        return run

    def add_rounds(self, run: Run, rows: Sequence[RoundMetrics]) -> List[RoundRecord]:
        """Attach per-round metrics to a run"""
        records = [RoundRecord(run_id=run.id, **asdict(row)) for row in rows]
        self.db.add_all(records)
        self.db.commit()
        return records

    def get_rounds(self, run_id: int) -> List[RoundRecord]:
        """Get round records of a run in round order"""
        return (
            self.db.query(RoundRecord)
            .filter(RoundRecord.run_id == run_id)
            .order_by(RoundRecord.round)
            .all()
        )

    def get_config(self, run: Run) -> RunConfig:
        """Rebuild the stored run configuration"""
        return RunConfig(**json.loads(run.config_json))

    def delete(self, run: Run) -> None:
        """Delete run and its rounds"""
        self.db.delete(run)
        self.db.commit()
