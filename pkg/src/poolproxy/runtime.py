"""Run an ASGI app on a real socket in a background thread (tests, bench)."""

from __future__ import annotations

import threading
import time

import uvicorn


class BackgroundServer:
    """Uvicorn server on an ephemeral port, owned by a daemon thread."""

    def __init__(self, app, host: str = "127.0.0.1", port: int = 0, log_level: str = "warning"):
        self.host = host
        self.port = port
        self._config = uvicorn.Config(
            app,
            host=host,
            port=port,
            log_level=log_level,
            access_log=False,
            lifespan="on",
            timeout_graceful_shutdown=5,
        )
        self.server = uvicorn.Server(self._config)
        self._thread: threading.Thread | None = None
        self.url = ""

    @property
    def app(self):
        return self._config.app

    def start(self, timeout: float = 15.0) -> "BackgroundServer":
        self._thread = threading.Thread(target=self.server.run, daemon=True)
        self._thread.start()
        deadline = time.monotonic() + timeout
        while time.monotonic() < deadline:
            if self.server.started:
                break
            if not self._thread.is_alive():
                raise RuntimeError("server thread died during startup")
            time.sleep(0.01)
        else:
            raise TimeoutError("server did not start in time")
        sockets = [s for srv in self.server.servers for s in srv.sockets]
        self.port = sockets[0].getsockname()[1]
        self.url = f"http://{self.host}:{self.port}"
        return self

    def stop(self, timeout: float = 10.0) -> None:
        self.server.should_exit = True
        if self._thread is not None:
            self._thread.join(timeout)
            if self._thread.is_alive():
                self.server.force_exit = True
                self._thread.join(5.0)

    def __enter__(self) -> "BackgroundServer":
        return self.start()

    def __exit__(self, *exc) -> None:
        self.stop()
