from typing import Any, Literal

import numpy as np
from pydantic_settings import BaseSettings, SettingsConfigDict


class Settings(BaseSettings):
    model_config = SettingsConfigDict(env_file=".env", env_prefix="APC_", extra="ignore")

    SEED: int = 0
    LOG_LEVEL: str = "INFO"
    PRECISION: Literal["float64", "float32"] = "float64"
    JOBS: int = 1

    GROUP: Literal["tetrahedral", "octahedral", "icosahedral"] = "octahedral"

    # convolution defaults, scene units on clouds normalized to unit diameter
    NEIGHBOR_RADIUS: float = 0.4
    KERNEL_POINTS: int = 15
    FEATURE_WIDTHS: tuple[int, ...] = (64, 128, 512)

    # joint regularizer
    JOINT_SAMPLES: int = 16
    JOINT_HALF_LEN_RATIO: float = 0.25
    LAMBDA_REG: float = 1.0

    VERIFY_TOL: float = 1e-4

    dtype: Any = None

    def model_post_init(self, __context) -> None:
        self.dtype = np.float32 if self.PRECISION == "float32" else np.float64


settings = Settings()
