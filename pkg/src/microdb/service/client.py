"""HTTP client for the service, used by the CLI and for outbound sync links."""

from __future__ import annotations

from typing import Any, Optional

import httpx

from ..errors import MicrodbError, TransportDown, from_code
from ..sync import split_frames


class Client:
    def __init__(self, url: str, token: Optional[str] = None, timeout: float = 30.0,
                 transport: Optional[httpx.BaseTransport] = None):
        headers = {"Authorization": f"Bearer {token}"} if token else {}
        self.http = httpx.Client(base_url=url.rstrip("/"), headers=headers, timeout=timeout, transport=transport)

    def close(self) -> None:
        self.http.close()

    def request(self, method: str, route: str, **kw) -> Any:
        try:
            resp = self.http.request(method, route, **kw)
        except httpx.TransportError as exc:
            raise TransportDown(f"{self.http.base_url}: {exc}") from None
        if resp.status_code >= 400:
            try:
                err = resp.json()
                code, message = err["code"], err["message"]
            except (ValueError, KeyError, TypeError):
                raise MicrodbError(f"HTTP {resp.status_code}: {resp.text[:200]}") from None
            raise from_code(code, message)
        if resp.status_code == 204 or not resp.content:
            return None
        if resp.headers.get("content-type", "").startswith("application/octet-stream"):
            return resp.content
        return resp.json()

    def get(self, route: str, **params) -> Any:
        return self.request("GET", route, params={k: v for k, v in params.items() if v is not None})

    def post(self, route: str, body: Any = None) -> Any:
        return self.request("POST", route, json=body)

    def delete(self, route: str) -> Any:
        return self.request("DELETE", route)


class HttpTransport:
    """Sync transport posting frame streams to a peer's ``/sync/frames``."""

    up = True

    def __init__(self, client: Client):
        self.client = client

    def exchange(self, frames: list[bytes]) -> list[bytes]:
        reply = self.client.request("POST", "/sync/frames", content=b"".join(frames),
                                    headers={"Content-Type": "application/octet-stream"})
        return split_frames(reply or b"")
