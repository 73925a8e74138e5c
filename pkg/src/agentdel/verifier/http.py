"""Demo HTTP shim: POST /authorize with {bundle, request} returns a Decision."""

from __future__ import annotations

from .._http import JsonServer
from .core import Verifier


def verifier_routes(v: Verifier) -> tuple[dict, dict]:
    def authorize(body: dict) -> dict:
        bundle = body.get("bundle")
        if not isinstance(bundle, list):
            bundle = []
        return v.authorize(bundle, body.get("request"), body.get("now")).to_json()

    gets = {"/health": lambda: {"status": "ok", "role": "verifier"}}
    return gets, {"/authorize": authorize}


def serve_verifier(v: Verifier, host: str = "127.0.0.1", port: int = 0) -> JsonServer:
    gets, posts = verifier_routes(v)
    return JsonServer(gets, posts, host, port)
