# Backend package (so "from backend.index import app" works from repo root).
