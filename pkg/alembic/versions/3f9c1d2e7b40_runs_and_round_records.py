"""Runs and round records

Revision ID: 3f9c1d2e7b40
Revises: 
Create Date: 2026-10-17 10:12:41.503218

"""
from alembic import op
import sqlalchemy as sa


# revision identifiers, used by Alembic.
revision = '3f9c1d2e7b40'
down_revision = None
branch_labels = None
depends_on = None


def upgrade() -> None:
    # ### commands auto generated by Alembic - please adjust! ###
    op.create_table('runs',
    sa.Column('id', sa.Integer(), nullable=False),
    sa.Column('strategy', sa.String(length=20), nullable=False),
    sa.Column('backend', sa.String(length=20), nullable=False),
    sa.Column('status', sa.Enum('COMPLETED', 'FAILED', name='runstatus'), nullable=False),
    sa.Column('rounds', sa.Integer(), nullable=False),
    sa.Column('clients', sa.Integer(), nullable=False),
    sa.Column('config_json', sa.Text(), nullable=False),
    sa.Column('final_loss', sa.Float(), nullable=True),
    sa.Column('final_accuracy', sa.Float(), nullable=True),
    sa.Column('total_ciphertext_bytes', sa.BigInteger(), nullable=False),
    sa.Column('total_plaintext_bytes', sa.BigInteger(), nullable=False),
    sa.Column('total_seconds', sa.Float(), nullable=False),
    sa.Column('rounds_to_target', sa.Integer(), nullable=True),
    sa.Column('error', sa.String(length=1000), nullable=True),
    sa.Column('created_at', sa.DateTime(), nullable=False),
    sa.CheckConstraint('clients > 0', name='check_clients_positive'),
    sa.CheckConstraint('rounds > 0', name='check_rounds_positive'),
    sa.PrimaryKeyConstraint('id')
    )
    op.create_index(op.f('ix_runs_id'), 'runs', ['id'], unique=False)
    op.create_index(op.f('ix_runs_status'), 'runs', ['status'], unique=False)
    op.create_index(op.f('ix_runs_strategy'), 'runs', ['strategy'], unique=False)
    op.create_table('round_records',
    sa.Column('id', sa.Integer(), nullable=False),
    sa.Column('run_id', sa.Integer(), nullable=False),
    sa.Column('round', sa.Integer(), nullable=False),
    sa.Column('local_train_s', sa.Float(), nullable=False),
    sa.Column('encrypt_s', sa.Float(), nullable=False),
    sa.Column('upload_s', sa.Float(), nullable=False),
    sa.Column('aggregate_s', sa.Float(), nullable=False),
    sa.Column('download_s', sa.Float(), nullable=False),
    sa.Column('decrypt_s', sa.Float(), nullable=False),
    sa.Column('update_s', sa.Float(), nullable=False),
    sa.Column('ciphertext_up', sa.BigInteger(), nullable=False),
    sa.Column('ciphertext_down', sa.BigInteger(), nullable=False),
    sa.Column('plaintext_up', sa.BigInteger(), nullable=False),
    sa.Column('plaintext_down', sa.BigInteger(), nullable=False),
    sa.Column('ct_count', sa.Integer(), nullable=False),
    sa.Column('loss', sa.Float(), nullable=False),
    sa.Column('accuracy', sa.Float(), nullable=False),
    sa.Column('retained', sa.Integer(), nullable=False),
    sa.Column('reactivated', sa.Integer(), nullable=False),
    sa.ForeignKeyConstraint(['run_id'], ['runs.id'], ),
    sa.PrimaryKeyConstraint('id')
    )
    op.create_index('idx_round_run_round', 'round_records', ['run_id', 'round'], unique=True)
    op.create_index(op.f('ix_round_records_id'), 'round_records', ['id'], unique=False)
    op.create_index(op.f('ix_round_records_run_id'), 'round_records', ['run_id'], unique=False)
    # ### end Alembic commands ###


def downgrade() -> None:
    # ### commands auto generated by Alembic - please adjust! ###
    op.drop_index(op.f('ix_round_records_run_id'), table_name='round_records')
    op.drop_index(op.f('ix_round_records_id'), table_name='round_records')
    op.drop_index('idx_round_run_round', table_name='round_records')
    op.drop_table('round_records')
    op.drop_index(op.f('ix_runs_strategy'), table_name='runs')
    op.drop_index(op.f('ix_runs_status'), table_name='runs')
    op.drop_index(op.f('ix_runs_id'), table_name='runs')
    op.drop_table('runs')
    # ### end Alembic commands ###
