import os
from dotenv import load_dotenv

# Find the .env file in the project root
BASE_DIR = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
env_path = os.path.join(BASE_DIR, ".env")

if os.path.exists(env_path):
    load_dotenv(env_path)

# Environment variables (all optional)
LOG_LEVEL = os.getenv("LOG_LEVEL", "INFO")
DATA_DIR = os.getenv("DATA_DIR", os.path.join(BASE_DIR, "data"))
DEFAULT_SEED = int(os.getenv("DEFAULT_SEED", "0"))
DEFAULT_JOBS = int(os.getenv("DEFAULT_JOBS", "1"))
FLOAT_DTYPE = os.getenv("FLOAT_DTYPE", "float64")

if FLOAT_DTYPE not in ("float64", "float32"):
    raise ValueError("FLOAT_DTYPE must be float64 or float32. Please fix the .env file in the project root.")
