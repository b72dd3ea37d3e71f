from fastapi import FastAPI
from fastapi.middleware.cors import CORSMiddleware

from app.api import reconstruct
from app.core.config import settings

app = FastAPI(title="CSD Reconstruction API", version="0.1.0")

app.add_middleware(
    CORSMiddleware,
    allow_origins=settings.CORS_ORIGINS,
    allow_credentials=True,
    allow_methods=["*"],
    allow_headers=["*"],
)

# Routers
app.include_router(reconstruct.router)


@app.get("/")
def read_root():
    return {"message": "CSD reconstruction API is running.", "status": "healthy", "version": "0.1.0"}
