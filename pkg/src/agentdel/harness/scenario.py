"""Declarative end-to-end scenarios.

A scenario is a JSON document::

    {"name": ..., "description": ..., "seed": 7, "start_time": 1700000000,
     "steps": [{"op": ..., ...}, ...],
     "audit": {"provider:op1": {"issue": 3}, "verifier:shop": {"authorize": 5}}}

Steps run in order against one logical clock and one seeded RNG, so a run is
fully deterministic.  Any step may carry ``expect_error`` with a reason code;
the step then passes only if it fails with exactly that code.  Named objects
(keys, tokens, agents, providers, verifiers) live in a registry and are
referenced by name.  In string arguments ``$pub:<key>`` expands to the public
key hex and ``$hash:<token>`` to a token hash.
"""

from __future__ import annotations

import copy
import hashlib
import json
import random
import time
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any, Callable

from ..audit import AuditLog
from ..crypto import Ed25519PrivateKey, generate_signing_key, public_key_hex
from ..policy import AccessRequest, Decision, Policy, is_attenuation_of
from ..provider import Provider, ProviderClient, ProviderConfig, serve_provider
from ..provider.config import PeerConfig, UserEntry
from ..scope import CompileDefaults, ResourceCatalog, activate, approve, compile_text, render_for_review
from ..tokens import (
    ClaimSet,
    TokenEnvelope,
    TrustStore,
    build_delegation,
    build_redelegation,
    sign_token,
    token_hash,
    verify_delegation_chain,
)
from ..verifier import Scripted, Verifier, VerifierConfig, auto_approve, auto_deny, parse_agent_directives, route_outbound
from .clock import LogicalClock


class ScenarioError(Exception):
    code = "ScenarioError"


class ExpectationFailed(ScenarioError):
    code = "ExpectationFailed"


class UnknownScenario(ScenarioError):
    code = "UnknownScenario"


@dataclass
class StepResult:
    index: int
    op: str
    ok: bool
    detail: str

    def line(self) -> str:
        mark = "ok  " if self.ok else "FAIL"
        return f"[{self.index:2d}] {mark} {self.op:<17} {self.detail}"


@dataclass
class ScenarioReport:
    name: str
    passed: bool
    steps: list[StepResult] = field(default_factory=list)
    audit_checks: list[str] = field(default_factory=list)
    elapsed: float = 0.0

    def transcript(self) -> str:
        lines = [f"scenario {self.name}"]
        lines += [s.line() for s in self.steps]
        lines += self.audit_checks
        lines.append(f"{'PASS' if self.passed else 'FAIL'} {self.name} ({self.elapsed:.2f}s)")
        return "\n".join(lines)

    def to_json(self) -> dict:
        return {
            "name": self.name,
            "passed": self.passed,
            "steps": [s.__dict__ for s in self.steps],
            "audit_checks": self.audit_checks,
            "elapsed": round(self.elapsed, 3),
        }


# -- registry ------------------------------------------------------------------


def scenario_dir() -> Path:
    return Path(str(resources.files("agentdel") / "scenarios"))


def list_scenarios() -> list[str]:
    return sorted(p.stem for p in scenario_dir().glob("*.json"))


def load_scenario(name_or_path: str) -> dict:
    path = Path(name_or_path)
    if not path.suffix == ".json" or not path.exists():
        path = scenario_dir() / f"{name_or_path}.json"
    if not path.exists():
        raise UnknownScenario(f"no scenario named {name_or_path!r}; known: {', '.join(list_scenarios())}")
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


# -- runner --------------------------------------------------------------------


@dataclass
class _ProviderHandle:
    provider: Provider
    api: Any  # Provider or ProviderClient
    server: Any = None

    @property
    def url(self) -> str | None:
        return self.server.url if self.server else None


def _code_of(exc: BaseException) -> str:
    code = getattr(exc, "code", None)
    return code if isinstance(code, str) else type(exc).__name__


def _set_path(data: Any, path: list, value: Any) -> None:
    for part in path[:-1]:
        data = data[part]
    data[path[-1]] = value


class ScenarioRunner:
    def __init__(self, script: dict, *, approval_timeout: float | None = None) -> None:
        self.script = script
        self.name = script.get("name", "unnamed")
        self.clock = LogicalClock(script.get("start_time", 1_700_000_000))
        self.rng = random.Random(script.get("seed", 0))
        self.providers: dict[str, _ProviderHandle] = {}
        self.keys: dict[str, Ed25519PrivateKey] = {}
        self.tokens: dict[str, TokenEnvelope] = {}
        self.agents: dict[str, dict] = {}
        self.verifiers: dict[str, Verifier] = {}
        self.approval_timeout = approval_timeout

    # -- helpers ---------------------------------------------------------------

    def secret(self, n: int) -> bytes:
        return self.rng.randbytes(n)

    def expand(self, value: Any) -> Any:
        if isinstance(value, str):
            if value.startswith("$pub:"):
                return public_key_hex(self.keys[value[5:]])
            if value.startswith("$hash:"):
                return token_hash(self.tokens[value[6:]])
            return value
        if isinstance(value, list):
            return [self.expand(v) for v in value]
        if isinstance(value, dict):
            return {k: self.expand(v) for k, v in value.items()}
        return value

    def token(self, name: str) -> TokenEnvelope:
        if name not in self.tokens:
            raise ScenarioError(f"unknown token {name!r}")
        return self.tokens[name]

    def window(self, step: dict, default: tuple[int, int] = (0, 3600)) -> tuple[int, int]:
        start, end = step.get("window", default)
        now = self.clock()
        return now + start, now + end

    def policy(self, step: dict) -> Policy:
        if "policy" in step:
            return Policy.from_json(self.expand(step["policy"]))
        catalog = ResourceCatalog(step.get("catalog", {}))
        draft = compile_text(step["cnl"], catalog, CompileDefaults(policy_id=step.get("policy_id")))
        self._last_review = render_for_review(draft)
        if step.get("approve"):
            key = self.keys[step["key"]]
            approver = self.token(step["user"]).claims.subject
            audit = self.providers[step["audit_provider"]].provider.audit if "audit_provider" in step else None
            appr = approve(draft, key, approver, self.clock(), audit=audit)
            return activate(draft.compiled, appr, public_key_hex(key))
        if draft.compiled is None:
            raise ScenarioError("CNL has unresolved labels: " + ", ".join(u.label for u in draft.unresolved_labels))
        return draft.compiled

    def request(self, data: dict) -> AccessRequest:
        data = dict(self.expand(data))
        data.setdefault("timestamp", self.clock())
        return AccessRequest.from_json(data)

    # -- ops -------------------------------------------------------------------

    def op_provider(self, step: dict) -> str:
        seed = step.get("signing_key_seed") or self.secret(32).hex()
        users = {u: UserEntry(u, hashlib.sha256(pw.encode()).hexdigest())
                 for u, pw in step.get("users", {}).items()}
        cfg = ProviderConfig(
            issuer_host=step["host"],
            signing_key_seed=seed,
            key_id=step.get("key_id", "k1"),
            pairwise_salt=step.get("pairwise_salt", self.secret(16).hex()),
            pairwise=step.get("pairwise", True),
            skew=step.get("skew", 60),
            max_user_token_lifetime=step.get("max_user_token_lifetime", 86400),
            max_agent_token_lifetime=step.get("max_agent_token_lifetime", 86400),
            users=users,
            key_cache_ttl=step.get("key_cache_ttl", 300),
        )
        provider = Provider(cfg, clock=self.clock, secret_source=self.secret, audit=AuditLog(clock=self.clock))
        handle = _ProviderHandle(provider, provider)
        if step.get("http"):
            handle.server = serve_provider(provider).start()
            handle.api = ProviderClient(handle.server.url)
            health = handle.api.health()
            if health.get("status") != "ok":
                raise ScenarioError(f"provider {step['name']} is not healthy")
        self.providers[step["name"]] = handle
        return f"{step['name']} at {handle.url or 'in-process'} issuer {cfg.issuer_host}"

    def op_federate(self, step: dict) -> str:
        """Make ``provider`` trust ``peer`` by pinned key or by key-document URL."""
        me, peer = self.providers[step["provider"]], self.providers[step["peer"]]
        mode = step.get("mode", "pin")
        if mode == "pin":
            entry = PeerConfig(peer.provider.host, peer.provider.public_key, peer.provider.key_id)
        else:
            if peer.url is None:
                raise ScenarioError("keys_url federation needs an HTTP peer")
            entry = PeerConfig(peer.provider.host, keys_url=peer.url + "/keys")
        me.provider.config.federation_peers[peer.provider.host] = entry
        return f"{step['provider']} trusts {step['peer']} via {mode}"

    def op_keygen(self, step: dict) -> str:
        self.keys[step["name"]] = generate_signing_key(self.secret(32))
        return f"{step['name']} = {public_key_hex(self.keys[step['name']])[:16]}..."

    def op_issue_user(self, step: dict) -> str:
        handle = self.providers[step["provider"]]
        assertion = {"username": step["user"], "password": step["password"]}
        env = handle.api.issue_user_token(assertion, public_key_hex(self.keys[step["key"]]), step.get("lifetime"))
        self.tokens[step["as"]] = env
        return f"{step['as']} subject {env.claims.subject} valid {env.claims.issued_at}..{env.claims.expires_at}"

    def op_register(self, step: dict) -> str:
        handle = self.providers[step["provider"]]
        metadata = dict(self.expand(step.get("metadata", {})))
        if "agent_key" in step:
            metadata["agent_key"] = public_key_hex(self.keys[step["agent_key"]])
        out = handle.api.register_agent(self.token(step["owner"]), metadata, step.get("local_id"))
        self.agents[step["as"]] = {"provider": step["provider"], **out}
        return f"{step['as']} registered as {out['global_id']}"

    def op_issue_agent(self, step: dict) -> str:
        agent = self.agents[step["agent"]]
        handle = self.providers[agent["provider"]]
        secret = step.get("client_secret", agent["client_secret"])
        env = handle.api.issue_agent_token(agent["local_id"], secret, step.get("audience"), step.get("lifetime"))
        self.tokens[step["as"]] = env
        return f"{step['as']} subject {env.claims.subject}"

    def op_delegate(self, step: dict) -> str:
        policy = self.policy(step)
        env = build_delegation(
            self.token(step["user"]),
            self.token(step["agent"]),
            policy,
            self.window(step),
            self.keys[step["key"]],
            goal_summary=step.get("goal_summary"),
            audit_url=step.get("audit_url"),
            revocation_url=step.get("revocation_url"),
        )
        self.tokens[step["as"]] = env
        if "record" in step:
            self.providers[step["record"]].api.record_delegation(env)
        return f"{step['as']} policy {policy.policy_id} ({len(policy.rules)} rules) hash {token_hash(env)[:12]}"

    def op_redelegate(self, step: dict) -> str:
        policy = self.policy(step)
        env = build_redelegation(
            self.token(step["parent"]),
            self.token(step["delegator"]),
            self.token(step["delegatee"]),
            policy,
            self.window(step),
            self.keys[step["key"]],
            goal_summary=step.get("goal_summary"),
        )
        self.tokens[step["as"]] = env
        if "record" in step:
            presented = [self.token(n) for n in step.get("presented", [])]
            self.providers[step["record"]].api.record_delegation(env, presented)
        return f"{step['as']} extends {step['parent']} with policy {policy.policy_id}"

    def op_record(self, step: dict) -> str:
        presented = [self.token(n) for n in step.get("presented", [])]
        h = self.providers[step["provider"]].api.record_delegation(self.token(step["token"]), presented)
        return f"{step['token']} recorded at {step['provider']} as {h[:12]}"

    def op_verifier(self, step: dict) -> str:
        trust = TrustStore()
        for name in step.get("pin", []):
            p = self.providers[name].provider
            trust.pin(p.host, p.key_id, p.public_key)
        for name, caller in step.get("introspect", {}).items():
            handle = self.providers[name]
            # resolve the caller token lazily so it can be re-issued mid-scenario
            trust.add_introspector(handle.provider.host,
                                   lambda env, api=handle.api, c=caller: api.introspect(env, self.token(c)))
        approval = step.get("approval", "auto_deny")
        if isinstance(approval, dict):
            handler: Callable = Scripted(approval["scripted"])
        else:
            handler = {"auto_deny": auto_deny, "auto_approve": auto_approve}[approval]
        timeout = step.get("approval_timeout", self.approval_timeout or 30.0)
        cfg = VerifierConfig(trust=trust, approval_handler=handler, approval_timeout=timeout,
                             audit=AuditLog(clock=self.clock), skew=step.get("skew", 60), clock=self.clock)
        self.verifiers[step["name"]] = Verifier(cfg)
        return f"{step['name']} pins {step.get('pin', [])} introspects {sorted(step.get('introspect', {}))}"

    def op_request(self, step: dict) -> str:
        verifier = self.verifiers[step["verifier"]]
        bundle = [self.token(n) for n in step["bundle"]]
        req = self.request(step["request"])
        if "robots" in step:
            req = route_outbound(req, parse_agent_directives(step["robots"]))
        decision: Decision = verifier.authorize(bundle, req)
        detail = f"{req.action} {req.resource} -> {decision.outcome.value} {list(decision.reasons)}"
        if decision.outcome.value != step["expect"]:
            raise ExpectationFailed(f"{detail}; expected {step['expect']}")
        if "reasons" in step and list(decision.reasons) != step["reasons"]:
            raise ExpectationFailed(f"{detail}; expected reasons {step['reasons']}")
        return detail

    def op_verify_chain(self, step: dict) -> str:
        trust = TrustStore()
        for name in step.get("pin", []):
            p = self.providers[name].provider
            trust.pin(p.host, p.key_id, p.public_key)
        vd = verify_delegation_chain([self.token(n) for n in step["bundle"]], trust, self.clock())
        if "depth" in step and vd.depth != step["depth"]:
            raise ExpectationFailed(f"depth {vd.depth}, expected {step['depth']}")
        return f"chain depth {vd.depth} window {vd.validity_window}"

    def op_advance(self, step: dict) -> str:
        return f"now {self.clock.advance(step['seconds'])}"

    def op_tamper(self, step: dict) -> str:
        """Copy a token, change one claim, keep the old signature."""
        env = self.token(step["token"])
        data = env.claims.to_json()
        _set_path(data, step["path"], self.expand(step["value"]))
        claims = ClaimSet.from_json(copy.deepcopy(data))
        self.tokens[step["as"]] = TokenEnvelope(claims, env.signer_key_id, env.signature)
        return f"{step['as']} = {step['token']} with {'.'.join(map(str, step['path']))} changed"

    def op_forge(self, step: dict) -> str:
        """Sign arbitrary claims with an attacker key under a chosen key id."""
        now = self.clock()
        start, end = step.get("window", [0, 3600])
        cs = ClaimSet(step["kind"], step["issuer"], self.expand(step["subject"]),
                      now + start, now + end, self.expand(step["claims"]))
        self.tokens[step["as"]] = sign_token(cs, self.keys[step["key"]], step.get("key_id", "k1"))
        return f"{step['as']} claims issuer {step['issuer']}"

    def op_introspect(self, step: dict) -> str:
        api = self.providers[step["provider"]].api
        target = self.token(step["target"])
        result = api.introspect(target, self.token(step["caller"]))
        for key, want in step.get("expect", {}).items():
            got = getattr(result, key)
            if isinstance(got, tuple):
                got = list(got)
            if got != want:
                raise ExpectationFailed(f"introspection {key}={got!r}, expected {want!r}")
        return f"{step['target']} active={result.active} revoked={result.revoked} {list(result.reasons)}"

    def op_revoke(self, step: dict) -> str:
        api = self.providers[step["provider"]].api
        out = api.revoke(token_hash(self.token(step["target"])), self.token(step["owner"]))
        return f"{step['target']} revoked at {out['revoked_at']}"

    def op_rotate_key(self, step: dict) -> str:
        p = self.providers[step["provider"]].provider
        return f"{step['provider']} now signs with {p.rotate_key(self.secret(32), step.get('key_id'))}"

    def op_federation_verify(self, step: dict) -> str:
        p = self.providers[step["provider"]].provider
        claims = p.federation_verify(self.token(step["token"]))
        return f"{step['token']} from {claims.issuer} verified at {step['provider']}"

    def op_compare_tokens(self, step: dict) -> str:
        a, b = self.token(step["a"]).claims.subject, self.token(step["b"]).claims.subject
        if (a == b) != step["same_subject"]:
            raise ExpectationFailed(f"subjects {a} and {b}: same={a == b}, expected {step['same_subject']}")
        return f"{a} vs {b}"

    def op_route(self, step: dict) -> str:
        req = route_outbound(self.request(step["request"]), parse_agent_directives(step["robots"]))
        if "expect_resource" in step and req.resource != step["expect_resource"]:
            raise ExpectationFailed(f"routed to {req.resource}, expected {step['expect_resource']}")
        if "expect_flags" in step and list(req.flags) != step["expect_flags"]:
            raise ExpectationFailed(f"flags {list(req.flags)}, expected {step['expect_flags']}")
        return f"-> {req.resource} {list(req.flags)}"

    def op_check_attenuation(self, step: dict) -> str:
        child = Policy.from_json(step["child"])
        parent = Policy.from_json(step["parent"])
        got = is_attenuation_of(child, parent)
        if got != step["expect"]:
            raise ExpectationFailed(f"is_attenuation_of = {got}, expected {step['expect']}")
        return f"{child.policy_id} attenuates {parent.policy_id}: {got}"

    # -- driver ----------------------------------------------------------------

    def run_step(self, index: int, step: dict) -> StepResult:
        op = step.get("op", "?")
        fn = getattr(self, f"op_{op}", None)
        if fn is None:
            return StepResult(index, op, False, f"unknown op {op!r}")
        want = step.get("expect_error")
        try:
            detail = fn(step)
        except ExpectationFailed as exc:
            return StepResult(index, op, False, str(exc))
        except Exception as exc:  # compared against expect_error
            code = _code_of(exc)
            if want is not None and code in (want if isinstance(want, list) else [want]):
                return StepResult(index, op, True, f"rejected with {code}")
            return StepResult(index, op, False, f"{code}: {exc}")
        if want is not None:
            return StepResult(index, op, False, f"expected {want}, step succeeded: {detail}")
        return StepResult(index, op, True, detail)

    def audit_logs(self) -> dict[str, AuditLog]:
        logs = {f"provider:{n}": h.provider.audit for n, h in self.providers.items()}
        logs.update({f"verifier:{n}": v.audit for n, v in self.verifiers.items()})
        return logs

    def check_audit(self) -> tuple[bool, list[str]]:
        ok = True
        lines = []
        logs = self.audit_logs()
        for name, log in logs.items():
            broken = log.verify()
            if broken is not None:
                ok = False
                lines.append(f"audit {name}: chain broken at {broken}")
        for name, expected in self.script.get("audit", {}).items():
            if name not in logs:
                ok = False
                lines.append(f"audit {name}: no such component")
                continue
            counts = logs[name].counts()
            got = {k: counts.get(k, 0) for k in expected}
            good = got == expected
            ok = ok and good
            lines.append(f"audit {name}: {got} {'ok' if good else f'expected {expected}'}")
        return ok, lines

    def close(self) -> None:
        for handle in self.providers.values():
            if handle.server is not None:
                handle.server.stop()

    def run(self) -> ScenarioReport:
        started = time.perf_counter()
        report = ScenarioReport(self.name, False)
        try:
            for i, step in enumerate(self.script.get("steps", [])):
                result = self.run_step(i, step)
                report.steps.append(result)
                if not result.ok:
                    break
            steps_ok = all(s.ok for s in report.steps) and len(report.steps) == len(self.script.get("steps", []))
            audit_ok, report.audit_checks = self.check_audit()
            report.passed = steps_ok and audit_ok
        finally:
            self.close()
            report.elapsed = time.perf_counter() - started
        return report


def run_scenario(name_or_script: str | dict, **kwargs: Any) -> ScenarioReport:
    script = name_or_script if isinstance(name_or_script, dict) else load_scenario(name_or_script)
    return ScenarioRunner(script, **kwargs).run()
