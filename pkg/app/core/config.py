from pydantic_settings import BaseSettings, SettingsConfigDict


class Settings(BaseSettings):
    model_config = SettingsConfigDict(
        env_file=".env",
        env_prefix="CSD_",
        case_sensitive=True,
        extra="ignore",
    )

    LOG_LEVEL: str = "INFO"
    OUTPUT_DIR: str = "runs"
    DEFAULT_SEED: int = 0

    # Idealized acquisition/inference time model
    PIXEL_TIME_S: float = 25e-6  # integration time per pixel
    REFERENCE_INFERENCE_S: float = 0.02  # GPU inference time ...
    REFERENCE_INFERENCE_STEPS: int = 20  # ... for this many diffusion steps

    PSNR_CAP_DB: float = 100.0

    # HTTP surface
    CHECKPOINT_PATH: str | None = None
    MAX_API_PIXELS: int = 256 * 256
    CORS_ORIGINS: list[str] = [
        "http://localhost:3000",
    ]


settings = Settings()
