import os
import sys
import logging
from fastapi import FastAPI, HTTPException
from fastapi.middleware.cors import CORSMiddleware

# Add backend directory to path so "from app.*" resolves to backend/app
sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

from app.models import HealthResponse, ReportListResponse
from app.storage import get_reports_dir, list_reports, read_report

# Configure logging
logging.basicConfig(level=os.getenv("LOG_LEVEL", "INFO"))
logger = logging.getLogger(__name__)

app = FastAPI(title="EDLCM Report Browser")

# Configure CORS
app.add_middleware(
    CORSMiddleware,
    allow_origins=["*"],
    allow_methods=["GET"],
    allow_headers=["*"],
)


@app.on_event("startup")
async def startup_event():
    reports_dir = get_reports_dir()
    if reports_dir.is_dir():
        logger.info(f"Serving {len(list_reports(reports_dir))} reports from {reports_dir}")
    else:
        logger.info(f"Reports directory {reports_dir} does not exist yet")


@app.get("/api/health", response_model=HealthResponse)
async def health_check():
    """Health check endpoint."""
    reports_dir = get_reports_dir()
    reachable = reports_dir.is_dir()
    return HealthResponse(
        status="healthy" if reachable else "unhealthy",
        reports_dir=str(reports_dir),
        report_count=len(list_reports(reports_dir)) if reachable else 0,
    )


@app.get("/api/reports", response_model=ReportListResponse)
async def get_reports():
    """List JSON and CSV reports in the reports directory."""
    return ReportListResponse(reports=list_reports(get_reports_dir()))


@app.get("/api/reports/{name}")
async def get_report(name: str):
    """Return one report: parsed JSON, or CSV rows as objects."""
    try:
        return read_report(get_reports_dir(), name)
    except FileNotFoundError:
        raise HTTPException(status_code=404, detail=f"Report not found: {name}")
    except ValueError as e:
        raise HTTPException(status_code=400, detail=str(e))
    except Exception as e:
        logger.error(f"Error reading report {name}: {e}")
        raise HTTPException(status_code=500, detail="Error reading report")
