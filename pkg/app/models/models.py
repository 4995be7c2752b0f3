from sqlalchemy import BigInteger, Column, Integer, String, Float, DateTime, ForeignKey, Enum, Text, CheckConstraint, Index
from sqlalchemy.orm import relationship
from datetime import datetime
import enum

from app.core.database import Base


class RunStatus(str, enum.Enum):
    COMPLETED = "completed"
    FAILED = "failed"


class Run(Base):
    __tablename__ = "runs"

    id = Column(Integer, primary_key=True, index=True)
    strategy = Column(String(20), nullable=False, index=True)
    backend = Column(String(20), nullable=False)
    status = Column(Enum(RunStatus), default=RunStatus.COMPLETED, nullable=False, index=True)
    rounds = Column(Integer, nullable=False)
    clients = Column(Integer, nullable=False)
    # RunConfig.model_dump() as JSON; alpha may be Infinity
    config_json = Column(Text, nullable=False)
    final_loss = Column(Float, nullable=True)
    final_accuracy = Column(Float, nullable=True)
    total_ciphertext_bytes = Column(BigInteger, default=0, nullable=False)
    total_plaintext_bytes = Column(BigInteger, default=0, nullable=False)
    total_seconds = Column(Float, default=0.0, nullable=False)
    rounds_to_target = Column(Integer, nullable=True)
    error = Column(String(1000), nullable=True)
    created_at = Column(DateTime, default=datetime.utcnow, nullable=False)

    round_records = relationship(
        "RoundRecord", back_populates="run", cascade="all, delete-orphan", order_by="RoundRecord.round"
    )

    __table_args__ = (
        CheckConstraint('rounds > 0', name='check_rounds_positive'),
        CheckConstraint('clients > 0', name='check_clients_positive'),
    )


class RoundRecord(Base):
    __tablename__ = "round_records"

    id = Column(Integer, primary_key=True, index=True)
    run_id = Column(Integer, ForeignKey("runs.id"), nullable=False, index=True)
    round = Column(Integer, nullable=False)
    local_train_s = Column(Float, nullable=False)
    encrypt_s = Column(Float, nullable=False)
    upload_s = Column(Float, nullable=False)
    aggregate_s = Column(Float, nullable=False)
    download_s = Column(Float, nullable=False)
    decrypt_s = Column(Float, nullable=False)
    update_s = Column(Float, nullable=False)
    ciphertext_up = Column(BigInteger, nullable=False)
    ciphertext_down = Column(BigInteger, nullable=False)
    plaintext_up = Column(BigInteger, nullable=False)
    plaintext_down = Column(BigInteger, nullable=False)
    ct_count = Column(Integer, nullable=False)
    loss = Column(Float, nullable=False)
    accuracy = Column(Float, nullable=False)
    retained = Column(Integer, nullable=False)
    reactivated = Column(Integer, nullable=False)

    run = relationship("Run", back_populates="round_records")

    __table_args__ = (
        Index('idx_round_run_round', 'run_id', 'round', unique=True),
    )
