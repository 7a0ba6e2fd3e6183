import os
import tempfile

# The run ledger must never touch a developer's database during tests; the
# engine is created at import time, so this has to happen before `app` loads.
_ledger_dir = tempfile.mkdtemp(prefix="ebpool-tests-")
os.environ["DATABASE_URL"] = f"sqlite:///{os.path.join(_ledger_dir, 'runs.db')}"
os.environ.setdefault("LOG_LEVEL", "WARNING")
