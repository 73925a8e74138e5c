"""``agentdel`` command line.

JSON goes to stdout.  Exit status: 0 success, 1 the operation failed or was
denied, 2 usage error.  Arguments naming a file accept ``-`` for stdin.
Keys are hex strings, given literally or as ``@path``.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path
from typing import Any, Sequence

from .._http import RemoteError
from ..audit import AuditError, AuditLog, query, read_log, verify_chain
from ..crypto import generate_signing_key, load_signing_key, private_key_hex, public_key_hex
from ..policy import AccessRequest, Policy, PolicyError, UsageState, evaluate
from ..provider import ConfigError, Provider, ProviderClient, ProviderError, load_config, serve_provider
from ..scope import (
    Approval,
    CompileDefaults,
    CompileError,
    ParseError,
    PolicyDraft,
    ResourceCatalog,
    activate,
    approve,
    compile_text,
    render_for_review,
)
from ..tokens import (
    TokenError,
    TrustStore,
    build_delegation,
    build_redelegation,
    decode_bundle,
    decode_token,
    token_hash,
    verify_delegation_chain,
)
from ..verifier import CliPrompt, Verifier, VerifierConfig, auto_deny, serve_verifier
from .scenario import ScenarioError, list_scenarios, run_scenario

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

log = logging.getLogger("agentdel")


class CliFailure(Exception):
    """Operation failed; reported as JSON on stderr with exit status 1."""

    def __init__(self, code: str, message: str) -> None:
        super().__init__(message)
        self.code = code


def _read_text(path: str) -> str:
    if path == "-":
        return sys.stdin.read()
    return Path(path).read_text(encoding="utf-8")


def _read_json(path: str) -> Any:
    text = _read_text(path)
    if path.endswith(".toml"):
        return tomllib.loads(text)
    return json.loads(text)


def _secret(value: str) -> str:
    return Path(value[1:]).read_text(encoding="utf-8").strip() if value.startswith("@") else value.strip()


def _emit(data: Any) -> None:
    if isinstance(data, str):
        sys.stdout.write(data if data.endswith("\n") else data + "\n")
    else:
        json.dump(data, sys.stdout, indent=2, sort_keys=True)
        sys.stdout.write("\n")


def _now(args: argparse.Namespace) -> int:
    return int(args.now) if getattr(args, "now", None) is not None else int(time.time())


def _provider(args: argparse.Namespace) -> Provider | ProviderClient:
    if args.url:
        return ProviderClient(args.url)
    return Provider(load_config(args.config))


def _bundle(path: str) -> list[str]:
    text = _read_text(path).strip()
    if text.startswith("["):
        return [str(t) for t in json.loads(text)]
    return [line.strip() for line in text.splitlines() if line.strip()]


def _token_out(env) -> dict:
    return {"token": env.encode(), "hash": token_hash(env), "claims": env.claims.to_json()}


# -- commands ------------------------------------------------------------------


def cmd_keygen(args: argparse.Namespace) -> int:
    key = generate_signing_key(bytes.fromhex(args.seed) if args.seed else None)
    _emit({"private_key": private_key_hex(key), "public_key": public_key_hex(key)})
    return 0


def cmd_issue_user(args: argparse.Namespace) -> int:
    p = _provider(args)
    assertion = {"username": args.user, "password": args.password}
    env = p.issue_user_token(assertion, _secret(args.public_key), args.lifetime)
    _emit(_token_out(env))
    return 0


def cmd_register(args: argparse.Namespace) -> int:
    p = _provider(args)
    metadata = json.loads(args.metadata) if args.metadata else {}
    if args.agent_key:
        metadata["agent_key"] = _secret(args.agent_key)
    _emit(p.register_agent(_secret(args.owner_token), metadata, args.local_id))
    return 0


def cmd_issue_agent(args: argparse.Namespace) -> int:
    p = _provider(args)
    env = p.issue_agent_token(args.local_id, _secret(args.client_secret), args.audience, args.lifetime)
    _emit(_token_out(env))
    return 0


def _load_policy(args: argparse.Namespace) -> Policy:
    if args.policy:
        return Policy.from_json(_read_json(args.policy))
    if not args.cnl:
        raise CliFailure("BadRequest", "give --policy or --cnl")
    catalog = ResourceCatalog.from_json(_read_json(args.catalog)) if args.catalog else ResourceCatalog()
    draft = compile_text(_read_text(args.cnl), catalog, CompileDefaults(policy_id=getattr(args, "policy_id", None)))
    if draft.compiled is None:
        labels = ", ".join(u.label for u in draft.unresolved_labels)
        raise CliFailure("UnresolvedLabels", f"unresolved labels: {labels}")
    return draft.compiled


def cmd_delegate(args: argparse.Namespace) -> int:
    policy = _load_policy(args)
    key = load_signing_key(_secret(args.key))
    now = _now(args)
    start = args.start if args.start is not None else now
    window = (start, args.end if args.end is not None else start + args.lifetime)
    agent = decode_token(_secret(args.agent_token))
    extra = {"goal_summary": args.goal, "audit_url": args.audit_url, "revocation_url": args.revocation_url}
    if args.parent:
        if not args.delegator_token:
            raise CliFailure("BadRequest", "--parent needs --delegator-token")
        env = build_redelegation(
            decode_token(_secret(args.parent)), decode_token(_secret(args.delegator_token)),
            agent, policy, window, key, **extra,
        )
    else:
        if not args.user_token:
            raise CliFailure("BadRequest", "give --user-token (or --parent for a re-delegation)")
        env = build_delegation(decode_token(_secret(args.user_token)), agent, policy, window, key, **extra)
    _emit(_token_out(env))
    return 0


def cmd_verify(args: argparse.Namespace) -> int:
    data = _read_json(args.trust)
    trust = TrustStore.from_json(data.get("trust", data))
    vd = verify_delegation_chain(decode_bundle(_bundle(args.bundle)), trust, _now(args), skew=args.skew)
    _emit(vd.to_json())
    return 0


def cmd_evaluate(args: argparse.Namespace) -> int:
    policy = Policy.from_json(_read_json(args.policy))
    now = _now(args)
    req = AccessRequest.from_json(_read_json(args.request), default_timestamp=now)
    decision = evaluate(policy, req, UsageState(), now)
    _emit(decision.to_json())
    return 0 if decision.permitted else 1


def cmd_compile_scope(args: argparse.Namespace) -> int:
    catalog = ResourceCatalog.from_json(_read_json(args.catalog)) if args.catalog else ResourceCatalog()
    draft = compile_text(_read_text(args.cnl), catalog, CompileDefaults(policy_id=args.policy_id))
    if args.review:
        _emit(render_for_review(draft))
        return 0 if draft.compiled is not None else 1
    if draft.compiled is None:
        raise CliFailure("UnresolvedLabels", ", ".join(u.label for u in draft.unresolved_labels))
    _emit(draft.compiled.to_json())
    return 0


def cmd_approve(args: argparse.Namespace) -> int:
    catalog = ResourceCatalog.from_json(_read_json(args.catalog)) if args.catalog else ResourceCatalog()
    if args.policy:
        policy = Policy.from_json(_read_json(args.policy))
        draft = PolicyDraft((), policy, "", (), policy, catalog)
    else:
        draft = compile_text(_read_text(args.cnl), catalog, CompileDefaults(policy_id=args.policy_id))
    approval = approve(draft, load_signing_key(_secret(args.key)), args.approver, _now(args))
    _emit({"policy": draft.compiled.to_json(), "approval": approval.to_json()})
    return 0


def cmd_activate(args: argparse.Namespace) -> int:
    data = _read_json(args.approved)
    policy = activate(Policy.from_json(data["policy"]), Approval.from_json(data["approval"]), _secret(args.public_key))
    _emit(policy.to_json())
    return 0


def _verifier_from_config(path: str) -> Verifier:
    data = _read_json(path)
    trust = TrustStore.from_json(data.get("trust", {}))
    for host, entry in data.get("introspect", {}).items():
        trust.add_introspector(host, ProviderClient(entry["url"]).introspector(entry["caller_token"]))
    handler = CliPrompt() if data.get("approval") == "prompt" else auto_deny
    audit_path = data.get("audit_path")
    if audit_path and path != "-" and not Path(audit_path).is_absolute():
        audit_path = str(Path(path).parent / audit_path)
    cfg = VerifierConfig(
        trust,
        approval_handler=handler,
        approval_timeout=float(data.get("approval_timeout", 30.0)),
        audit=AuditLog(audit_path),
        skew=int(data.get("skew", 60)),
    )
    return Verifier(cfg)


def cmd_serve(args: argparse.Namespace) -> int:
    if args.role == "provider":
        server = serve_provider(Provider(load_config(args.config)), args.host, args.port)
    else:
        server = serve_verifier(_verifier_from_config(args.config), args.host, args.port)
    server.start()
    sys.stderr.write(f"{args.role} listening on {server.url}\n")
    sys.stderr.flush()
    try:
        while True:
            time.sleep(3600)
    except KeyboardInterrupt:
        pass
    finally:
        server.stop()
    return 0


def cmd_audit_verify(args: argparse.Namespace) -> int:
    records = read_log(args.log)
    broken = verify_chain(records, expected_head=args.head)
    head = records[-1].record_hash if records and records[-1] is not None else None
    _emit({"records": len(records), "ok": broken is None, "first_bad": broken, "head": head})
    return 0 if broken is None else 1


def cmd_audit_query(args: argparse.Namespace) -> int:
    records = read_log(args.log)
    broken = verify_chain(records)
    if broken is not None:
        raise CliFailure("AuditFailure", f"log is broken at record {broken}")
    hits = query(records, kind=args.kind, actor=args.actor, subject_ref=args.subject_ref,
                 since=args.since, until=args.until)
    _emit([r.to_json() for r in hits])
    return 0


def cmd_run(args: argparse.Namespace) -> int:
    names = list_scenarios() if args.scenario == "all" else [args.scenario]
    ok = True
    reports = []
    for name in names:
        report = run_scenario(name)
        ok = ok and report.passed
        reports.append(report)
        if not args.json:
            sys.stdout.write(report.transcript() + "\n")
    if args.json:
        _emit([r.to_json() for r in reports])
    return 0 if ok else 1


def cmd_list(args: argparse.Namespace) -> int:
    _emit("\n".join(list_scenarios()))
    return 0


# -- parser --------------------------------------------------------------------


def _provider_target(sp: argparse.ArgumentParser) -> None:
    g = sp.add_mutually_exclusive_group(required=True)
    g.add_argument("--url", help="base URL of a running provider")
    g.add_argument("--config", help="provider config file (use a sqlite store to keep state between calls)")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="agentdel", description="Delegated authorization for AI agents.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("keygen", help="generate an Ed25519 key pair")
    sp.add_argument("--seed", help="32-byte hex seed for a deterministic key")
    sp.set_defaults(func=cmd_keygen)

    sp = sub.add_parser("issue-user", help="obtain a user ID token")
    _provider_target(sp)
    sp.add_argument("--user", required=True)
    sp.add_argument("--password", required=True)
    sp.add_argument("--public-key", required=True, help="user public key to bind (hex or @file)")
    sp.add_argument("--lifetime", type=int)
    sp.set_defaults(func=cmd_issue_user)

    sp = sub.add_parser("register", help="register an agent instance")
    _provider_target(sp)
    sp.add_argument("--owner-token", required=True)
    sp.add_argument("--local-id")
    sp.add_argument("--metadata", help="JSON object with capabilities, limitations, model_descriptor")
    sp.add_argument("--agent-key", help="agent public key enabling re-delegation")
    sp.set_defaults(func=cmd_register)

    sp = sub.add_parser("issue-agent", help="obtain an agent ID token")
    _provider_target(sp)
    sp.add_argument("--local-id", required=True)
    sp.add_argument("--client-secret", required=True)
    sp.add_argument("--audience")
    sp.add_argument("--lifetime", type=int)
    sp.set_defaults(func=cmd_issue_agent)

    sp = sub.add_parser("delegate", help="sign a delegation token")
    sp.add_argument("--user-token")
    sp.add_argument("--agent-token", required=True, help="delegatee agent ID token")
    sp.add_argument("--parent", help="parent delegation token (re-delegation)")
    sp.add_argument("--delegator-token", help="delegating agent ID token (re-delegation)")
    sp.add_argument("--key", required=True, help="signing key (hex or @file)")
    sp.add_argument("--policy", help="policy JSON file")
    sp.add_argument("--cnl", help="scope text file")
    sp.add_argument("--catalog", help="resource catalog JSON file")
    sp.add_argument("--policy-id")
    sp.add_argument("--start", type=int)
    sp.add_argument("--end", type=int)
    sp.add_argument("--lifetime", type=int, default=3600)
    sp.add_argument("--goal")
    sp.add_argument("--audit-url")
    sp.add_argument("--revocation-url")
    sp.add_argument("--now", type=int)
    sp.set_defaults(func=cmd_delegate)

    sp = sub.add_parser("verify", help="verify a delegation bundle")
    sp.add_argument("--bundle", default="-", help="JSON list or one token per line (default stdin)")
    sp.add_argument("--trust", required=True, help='{"host": {"key_id": ..., "public_key": ...}} or a verifier config')
    sp.add_argument("--now", type=int)
    sp.add_argument("--skew", type=int, default=60)
    sp.set_defaults(func=cmd_verify)

    sp = sub.add_parser("evaluate", help="evaluate one request against a policy (no usage state)")
    sp.add_argument("--policy", required=True)
    sp.add_argument("--request", default="-", help="request JSON file (default stdin)")
    sp.add_argument("--now", type=int)
    sp.set_defaults(func=cmd_evaluate)

    sp = sub.add_parser("compile-scope", help="compile scope text into a policy")
    sp.add_argument("--cnl", default="-", help="scope text file (default stdin)")
    sp.add_argument("--catalog")
    sp.add_argument("--policy-id")
    sp.add_argument("--review", action="store_true", help="print the review rendering instead")
    sp.set_defaults(func=cmd_compile_scope)

    sp = sub.add_parser("approve", help="sign approval of a compiled policy")
    src = sp.add_mutually_exclusive_group(required=True)
    src.add_argument("--policy")
    src.add_argument("--cnl")
    sp.add_argument("--catalog")
    sp.add_argument("--policy-id")
    sp.add_argument("--key", required=True)
    sp.add_argument("--approver", required=True)
    sp.add_argument("--now", type=int)
    sp.set_defaults(func=cmd_approve)

    sp = sub.add_parser("activate", help="check an approval and print the active policy")
    sp.add_argument("--approved", required=True, help="output of approve")
    sp.add_argument("--public-key", required=True)
    sp.set_defaults(func=cmd_activate)

    sp = sub.add_parser("serve", help="run a provider or verifier over HTTP")
    sp.add_argument("--role", choices=("provider", "verifier"), default="provider")
    sp.add_argument("--config", required=True)
    sp.add_argument("--host", default="127.0.0.1")
    sp.add_argument("--port", type=int, default=8080)
    sp.set_defaults(func=cmd_serve)

    sp = sub.add_parser("audit", help="inspect an audit log")
    asub = sp.add_subparsers(dest="audit_command", required=True)
    av = asub.add_parser("verify", help="check the hash chain")
    av.add_argument("log")
    av.add_argument("--head", help="expected head hash (detects truncation)")
    av.set_defaults(func=cmd_audit_verify)
    aq = asub.add_parser("query", help="filter records")
    aq.add_argument("log")
    aq.add_argument("--kind")
    aq.add_argument("--actor")
    aq.add_argument("--subject-ref")
    aq.add_argument("--since", type=int)
    aq.add_argument("--until", type=int)
    aq.set_defaults(func=cmd_audit_query)

    sp = sub.add_parser("run", help="run a scenario (or 'all')")
    sp.add_argument("scenario")
    sp.add_argument("--json", action="store_true")
    sp.set_defaults(func=cmd_run)

    sp = sub.add_parser("list", help="list bundled scenarios")
    sp.set_defaults(func=cmd_list)
    return ap


_FAILURES = (
    CliFailure, TokenError, PolicyError, ParseError, CompileError, ProviderError, RemoteError,
    ConfigError, AuditError, ScenarioError, OSError, ValueError, KeyError,
)


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, stream=sys.stderr)
    try:
        return args.func(args)
    except _FAILURES as exc:
        code = getattr(exc, "code", None) or type(exc).__name__
        json.dump({"error": str(code), "message": str(exc)}, sys.stderr)
        sys.stderr.write("\n")
        return 1


if __name__ == "__main__":
    sys.exit(main())
