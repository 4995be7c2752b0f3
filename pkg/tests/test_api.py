import pytest
from fastapi.testclient import TestClient
from sqlalchemy import BigInteger, create_engine
from sqlalchemy.orm import sessionmaker

from main import app
from app.core.database import Base, get_db
from app.dictpfl.protocol import METRICS_HEADER, RoundMetrics, RunSummary
from app.models.models import RoundRecord, Run
from app.schemas.schemas import RunConfig, Strategy
from app.repositories.run_repository import RunRepository

# Test database
SQLALCHEMY_DATABASE_URL = "sqlite:///./test.db"
engine = create_engine(SQLALCHEMY_DATABASE_URL, connect_args={"check_same_thread": False})
TestingSessionLocal = sessionmaker(autocommit=False, autoflush=False, bind=engine)


def override_get_db():
    try:
        db = TestingSessionLocal()
        yield db
    finally:
        db.close()


pytestmark = pytest.mark.integration

app.dependency_overrides[get_db] = override_get_db
client = TestClient(app)

SMALL_RUN = {
    "strategy": "dictpfl",
    "clients": 2,
    "rounds": 3,
    "classes": 3,
    "dim": 6,
    "hidden": 8,
    "samples_per_class": 15,
    "rank": 2,
    "seed": 1,
}


@pytest.fixture(scope="function")
def setup_database():
    """Setup and teardown test database"""
    Base.metadata.create_all(bind=engine)
    yield
    Base.metadata.drop_all(bind=engine)


@pytest.fixture
def test_run(setup_database):
    """Create a completed run through the API"""
    response = client.post("/runs", json=SMALL_RUN)
    assert response.status_code == 201
    return response.json()


# ===== HEALTH TESTS =====

def test_root(setup_database):
    """Test welcome endpoint"""
    response = client.get("/")
    assert response.status_code == 200
    assert "DictPFL" in response.json()["message"]


def test_health(setup_database):
    """Test health endpoint"""
    response = client.get("/health")
    assert response.status_code == 200
    assert response.json() == {"status": "healthy"}


# ===== RUN TESTS =====

def test_create_run(test_run):
    """Test running a simulation"""
    assert test_run["strategy"] == "dictpfl"
    assert test_run["status"] == "completed"
    assert test_run["rounds"] == 3
    assert test_run["total_plaintext_bytes"] == 0
    assert test_run["total_ciphertext_bytes"] > 0
    assert 0.0 <= test_run["final_accuracy"] <= 1.0


def test_create_run_invalid_prune(setup_database):
    """Test prune fraction outside [0, 1)"""
    response = client.post("/runs", json={**SMALL_RUN, "prune": 1.5})
    assert response.status_code == 422


def test_create_run_unknown_field(setup_database):
    """Test unknown configuration keys are rejected"""
    response = client.post("/runs", json={**SMALL_RUN, "momentum": 0.9})
    assert response.status_code == 422


def test_create_run_missing_dataset(setup_database):
    """Test a dataset path that does not exist"""
    response = client.post("/runs", json={**SMALL_RUN, "data_path": "does-not-exist.bin"})
    assert response.status_code == 422


def test_get_runs(test_run):
    """Test listing runs"""
    response = client.get("/runs")
    assert response.status_code == 200
    data = response.json()
    assert len(data) == 1
    assert data[0]["id"] == test_run["id"]


def test_get_runs_filtered(test_run):
    """Test strategy and status filters"""
    full = client.post("/runs", json={**SMALL_RUN, "strategy": "full"})
    assert full.status_code == 201

    response = client.get("/runs", params={"strategy": "full"})
    assert [run["strategy"] for run in response.json()] == ["full"]

    response = client.get("/runs", params={"status": "failed"})
    assert response.json() == []

    response = client.get("/runs", params={"status": "completed"})
    assert len(response.json()) == 2


def test_get_run_by_id(test_run):
    """Test getting run by ID"""
    response = client.get(f"/runs/{test_run['id']}")
    assert response.status_code == 200
    assert response.json()["final_loss"] == test_run["final_loss"]



def test_rerun_reproduces_run(test_run):
    """Test repeating a stored run gives a new run with identical results"""
    response = client.post(f"/runs/{test_run['id']}/rerun")
    assert response.status_code == 201
    data = response.json()
    assert data["id"] != test_run["id"]
    assert data["final_loss"] == test_run["final_loss"]
    assert data["total_ciphertext_bytes"] == test_run["total_ciphertext_bytes"]

    first = client.get(f"/runs/{test_run['id']}/metrics.csv").text
    second = client.get(f"/runs/{data['id']}/metrics.csv").text
    assert first == second


def test_rerun_nonexistent_run(setup_database):
    """Test repeating a run that does not exist"""
    response = client.post("/runs/99999/rerun")
    assert response.status_code == 404

def test_get_nonexistent_run(setup_database):
    """Test getting non-existent run"""
    response = client.get("/runs/99999")
    assert response.status_code == 404


def test_get_run_rounds(test_run):
    """Test per-round metrics are stored in order"""
    response = client.get(f"/runs/{test_run['id']}/rounds")
    assert response.status_code == 200
    rounds = response.json()
    assert [r["round"] for r in rounds] == [1, 2, 3]
    assert all(r["plaintext_up"] == 0 for r in rounds)
    assert rounds[-1]["accuracy"] == test_run["final_accuracy"]


def test_get_run_metrics_csv(test_run):
    """Test CSV export of a stored run"""
    response = client.get(f"/runs/{test_run['id']}/metrics.csv")
    assert response.status_code == 200
    assert response.headers["content-type"].startswith("text/csv")
    lines = response.text.split("\r\n")
    assert lines[0] == ",".join(METRICS_HEADER)
    assert len([line for line in lines[1:] if line]) == 3


def test_stored_config_round_trips(test_run):
    """Test the stored configuration rebuilds the request, including alpha=inf"""
    db = TestingSessionLocal()
    run = db.query(Run).filter(Run.id == test_run["id"]).first()
    config = RunRepository(db).get_config(run)
    db.close()
    assert config.rank == 2
    assert config.alpha == float("inf")


def test_delete_run(test_run):
    """Test deleting a run and its rounds"""
    response = client.delete(f"/runs/{test_run['id']}")
    assert response.status_code == 204

    assert client.get(f"/runs/{test_run['id']}").status_code == 404
    assert client.get(f"/runs/{test_run['id']}/rounds").status_code == 404



def test_byte_counters_are_64_bit():
    """Test every byte counter column is a BIGINT"""
    columns = [
        Run.__table__.c.total_ciphertext_bytes,
        Run.__table__.c.total_plaintext_bytes,
        RoundRecord.__table__.c.ciphertext_up,
        RoundRecord.__table__.c.ciphertext_down,
        RoundRecord.__table__.c.plaintext_up,
        RoundRecord.__table__.c.plaintext_down,
    ]
    assert all(isinstance(column.type, BigInteger) for column in columns)


def test_store_production_scale_byte_totals(setup_database):
    """Test totals above 2**31 (30 rounds, 3 clients, production ciphertexts) are stored intact"""
    total = 30 * 6 * 25_559_040
    summary = RunSummary(
        strategy=Strategy.FULL, rounds=30, final_loss=0.1, final_accuracy=0.9,
        total_ciphertext_bytes=total, total_plaintext_bytes=0, total_seconds=1.0, rounds_to_target=None,
    )
    db = TestingSessionLocal()
    repo = RunRepository(db)
    run = repo.create(RunConfig(strategy="full"), summary)
    repo.add_rounds(run, [RoundMetrics(round=1, ciphertext_up=3 * 25_559_040 * 40)])
    run_id = run.id
    db.close()

    response = client.get(f"/runs/{run_id}")
    assert response.json()["total_ciphertext_bytes"] == total == 4_600_627_200
    rounds = client.get(f"/runs/{run_id}/rounds").json()
    assert rounds[0]["ciphertext_up"] == 3_067_084_800

# ===== DRY RUN TESTS =====

def test_dry_run(setup_database):
    """Test analytic cost of one 768x768 layer"""
    response = client.post("/dryrun", json={"layers": [{"name": "proj", "n": 768, "m": 768}]})
    assert response.status_code == 200
    data = response.json()
    costs = {cost["strategy"]: cost for cost in data["costs"]}
    assert costs["full"]["encrypted_elements"] == 589824
    assert costs["dictpfl"]["encrypted_elements"] == 922
    assert data["reduction_elements"] == pytest.approx(589824 / 922)


def test_dry_run_empty_layers(setup_database):
    """Test a request without layers"""
    response = client.post("/dryrun", json={"layers": []})
    assert response.status_code == 422


def test_dry_run_bad_shape(setup_database):
    """Test non-positive layer dimensions"""
    response = client.post("/dryrun", json={"layers": [{"name": "proj", "n": 0, "m": 4}]})
    assert response.status_code == 422
