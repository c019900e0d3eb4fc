"""Imported only inside the multiprocessing fork server.

Preloading ``"__main__"`` is supposed to load the launching script once in
the fork server, but Python 3.10 never passes the script's path along, so
every worker re-runs the script's imports instead (for a pytest run that
costs tens of milliseconds of CPU per worker). :func:`start_fork_server`
hands the path over in the environment; importing this module loads it as
the fork server's ``__main__``, and workers then find it already in place.
"""
from __future__ import annotations

import logging
import os
import sys
import threading
from multiprocessing import forkserver, process, spawn

ENV = "SWEEPD_FORK_MAIN"

_lock = threading.Lock()


def launching_script() -> str | None:
    """The path a worker would re-run, or None if it would not re-run one."""
    return spawn.get_preparation_data("probe").get("init_main_from_path")


def start_fork_server() -> None:
    with _lock:
        path = launching_script()
        if path is not None:
            os.environ[ENV] = path
        try:
            forkserver.ensure_running()
        finally:
            os.environ.pop(ENV, None)


def _load(path: str) -> None:
    process.current_process()._inheriting = True
    try:
        spawn.import_main_path(path)
    except Exception:
        # workers fall back to re-running the script themselves
        logging.getLogger(__name__).exception("fork server could not load %s", path)
    finally:
        del process.current_process()._inheriting


if __name__ != "__main__" and os.environ.get(ENV) \
        and getattr(sys.modules["__main__"], "__file__", None) != os.environ[ENV]:
    _load(os.environ.pop(ENV))
