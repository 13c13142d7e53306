"""Scripted adversary scenarios against a live multi-process deployment.

A scenario file is JSON::

    {"name": "...", "seed": 1,
     "topology": {"owner": "alice", "services": ["acme"], "policies": {...},
                  "devices": [{"kind": "Temperature", "stream_id": "temp", ...}]},
     "events": [{"op": "simulate", "ticks": 50}, {"op": "sync"}, ...],
     "expect": ["a", "e2e"]}

Each event may record checks.  A check belongs to one verdict:

    a     honest-but-curious cloud learns no sentinel or secret bytes
    b     an unauthorized service fails on every access path
    c     a tampered item is rejected with IntegrityFailure
    d     deleted or reordered items raise ChainBreak
    e     after revocation, new-epoch items stay undecryptable
    f     a replayed wire frame ends the session with ReplayDetected
    e2e   service output equals the simulator's ground truth
    flow  the trust point sent no plaintext-bearing message
    control  owner decisions and grant status round trips

The report lists checks in script order with deterministic details, so two
runs with the same seed give identical reports.
"""

from __future__ import annotations

import json
import os
import subprocess
import sys
import time
import xml.etree.ElementTree as ET
from dataclasses import asdict, dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any, Callable

import sensorcloud
from sensorcloud import canonical, sim, wire
from sensorcloud.domain import ProtectionPolicy, SensorReading, policy_view
from sensorcloud.errors import SensorCloudError
from sensorcloud.harness.deploy import Deployment, EnvironmentFailure, Topology, dump_bytes
from sensorcloud.harness.scan import scan
from sensorcloud.harness.shim import C2S, Attack
from sensorcloud.objsec import ProtectedDataItem, try_open, verify_chain
from sensorcloud.service import decrypt_offline, rolling_average

VERDICTS = {
    "a": "honest-but-curious cloud",
    "b": "unauthorized service",
    "c": "tamper",
    "d": "delete/reorder",
    "e": "post-revocation",
    "f": "wire replay",
    "e2e": "ground truth",
    "flow": "flow rule",
    "control": "owner control",
}


@dataclass
class Check:
    event: int
    op: str
    verdict: str
    name: str
    passed: bool
    detail: str


@dataclass
class Report:
    scenario: str
    seed: Any
    expected: list[str]
    checks: list[Check] = field(default_factory=list)
    error: str | None = None
    metrics: dict[str, Any] = field(default_factory=dict)

    def verdicts(self) -> dict[str, str]:
        out: dict[str, str] = {}
        for c in self.checks:
            prev = out.get(c.verdict, "pass")
            out[c.verdict] = "pass" if prev == "pass" and c.passed else "fail"
        for v in self.expected:
            out.setdefault(v, "missing")
        return dict(sorted(out.items()))

    @property
    def passed(self) -> bool:
        return self.error is None and all(v == "pass" for v in self.verdicts().values())

    def to_dict(self) -> dict[str, Any]:
        """The stable part of the report (no timings, no random identifiers)."""
        return {
            "checks": [asdict(c) for c in self.checks],
            "error": self.error,
            "passed": self.passed,
            "scenario": self.scenario,
            "seed": self.seed,
            "verdicts": self.verdicts(),
        }

    def junit_element(self) -> ET.Element:
        suite = ET.Element("testsuite", name=self.scenario, tests=str(len(self.checks) + 1),
                           failures=str(sum(not c.passed for c in self.checks)),
                           errors="1" if self.error else "0",
                           time=f"{self.metrics.get('elapsed_s', 0.0):.3f}")
        for c in self.checks:
            case = ET.SubElement(suite, "testcase", classname=f"{self.scenario}.{c.verdict}",
                                 name=f"{c.event:02d}-{c.op}-{c.name}")
            if not c.passed:
                ET.SubElement(case, "failure", message=c.detail).text = c.detail
            else:
                ET.SubElement(case, "system-out").text = c.detail
        env = ET.SubElement(suite, "testcase", classname=f"{self.scenario}.environment", name="daemons")
        if self.error:
            ET.SubElement(env, "error", type="EnvironmentFailure", message=self.error[:500]).text = self.error
        for v, state in self.verdicts().items():
            if state == "missing":
                case = ET.SubElement(suite, "testcase", classname=f"{self.scenario}.{v}", name="expected")
                ET.SubElement(case, "failure", message=f"verdict {v} was expected but never checked")
        return suite


def junit_xml(reports: list[Report]) -> str:
    root = ET.Element("testsuites")
    root.extend(r.junit_element() for r in reports)
    ET.indent(root)
    return ET.tostring(root, encoding="unicode") + "\n"


def load_scenario(name_or_path: str | Path) -> dict[str, Any]:
    p = Path(name_or_path)
    if p.suffix == ".json" or p.exists():
        return json.loads(p.read_text())
    text = resources.files("sensorcloud.harness").joinpath("scenarios", f"{name_or_path}.json").read_text()
    return json.loads(text)


def builtin_scenarios() -> list[str]:
    d = resources.files("sensorcloud.harness").joinpath("scenarios")
    return sorted(p.name[:-5] for p in d.iterdir() if p.name.endswith(".json"))


class _Runner:
    def __init__(self, scenario: dict[str, Any], workdir: Path | None):
        self.sc = scenario
        self.seed = scenario.get("seed", 0)
        self.topology = Topology.from_dict(scenario["topology"], self.seed)
        self.dep = Deployment(self.topology, self.seed, workdir)
        self.report = Report(scenario["name"], self.seed, list(scenario.get("expect", [])))
        self.tick = 0
        self.truth: dict[str, list[tuple[int, SensorReading]]] = {s: [] for s in self.topology.streams}
        self.sentinels: list[bytes] = []
        self.requests: dict[str, tuple[str, str]] = {}
        self.event = 0
        self.op = ""

    # --- plumbing --------------------------------------------------------------------

    def check(self, verdict: str, name: str, passed: bool, detail: str) -> None:
        self.report.checks.append(Check(self.event, self.op, verdict, name, bool(passed), detail))

    def policy(self, stream: str) -> ProtectionPolicy:
        return ProtectionPolicy.from_dict(self.topology.policies.get(stream, {}))

    def epochs_now(self) -> dict[str, int]:
        return {row["stream_id"]: row["epoch"] for row in self.dep.tp_command("streams")}

    def truth_range(self, stream: str, lo: int, hi: int | None) -> list[SensorReading]:
        return [r for e, r in self.truth[stream] if e >= lo and (hi is None or e <= hi)]

    def run(self) -> Report:
        started = time.monotonic()
        try:
            self.dep.start()
            for i, ev in enumerate(self.sc.get("events", [])):
                self.event, self.op = i, ev["op"]
                handler: Callable[[dict], None] = getattr(self, "op_" + ev["op"].replace("-", "_"))
                handler(ev)
                self.dep.check_alive()
        except EnvironmentFailure as exc:
            self.report.error = f"EnvironmentFailure: {exc}"
        except SensorCloudError as exc:
            self.report.error = f"event {self.event} ({self.op}) failed: {exc.code}: {exc}"
        finally:
            self.report.metrics["elapsed_s"] = round(time.monotonic() - started, 3)
            self.report.metrics["readings"] = sum(len(v) for v in self.truth.values())
            self.dep.cleanup()
        return self.report

    # --- data path -------------------------------------------------------------------

    def op_simulate(self, ev: dict) -> None:
        ticks = int(ev["ticks"])
        epochs = self.epochs_now()
        log = self.dep.workdir / f"truth-{self.tick}.ndjson"
        sim.run(self.topology.devices, ticks, self.dep.ingest_endpoint, log, str(self.seed), start_tick=self.tick)
        for r in sim.read_ground_truth(log):
            self.truth[r.stream_id].append((epochs[r.stream_id], r))
            if r.location_tag and r.location_tag.startswith(sim.SENTINEL_PREFIX):
                self.sentinels.append(r.location_tag.encode())
        self.tick += ticks

    def op_sync(self, ev: dict) -> None:
        for _ in range(int(ev.get("max_rounds", 20))):
            self.dep.tp_command("sync")
            st = self.dep.tp_command("status")
            if st["queue"] == 0 and st["outbox"] == 0:
                return
        self.check("control", "settled", False, f"trust point still has {st['queue']} uploads queued")

    def op_check_complete(self, ev: dict) -> None:
        """The cloud holds exactly one item per ground-truth reading."""
        for stream in self.topology.streams:
            stored = len(self.dep.stored_items(stream))
            want = len(self.truth[stream])
            self.check(ev.get("verdict", "e2e"), f"complete-{stream}", stored == want,
                       f"{stored} stored items for {want} readings")

    # --- owner and service control -------------------------------------------------------

    def op_register(self, ev: dict) -> None:
        self.dep.service(ev["service"]).register(ev.get("manifest", ev["service"]))

    def op_request(self, ev: dict) -> None:
        lo, hi = ev.get("epochs", [0, 0])
        client = self.dep.service(ev["service"])
        rid = client.request_access(self.dep.owner, ev["streams"], lo, hi, ev.get("purpose", ""))
        self.requests[ev.get("as", rid)] = (ev["service"], rid)

    def _decide(self, verb: str, ev: dict) -> None:
        proc = self.dep.owner_cli(verb, ev["grant"])
        want = ev.get("expect", "ok")
        if want == "ok":
            ok = proc.returncode == 0
            detail = "accepted" if ok else proc.stderr.strip()
        else:
            ok = proc.returncode == 1 and want in proc.stderr
            detail = f"rejected with {want}" if ok else f"exit {proc.returncode}: {proc.stderr.strip()}"
        self.check("control", f"{verb}-{ev['grant']}", ok, detail)

    def op_approve(self, ev: dict) -> None:
        self._decide("grant", ev)

    def op_deny(self, ev: dict) -> None:
        self._decide("deny", ev)

    def op_revoke(self, ev: dict) -> None:
        self._decide("revoke", ev)

    def op_poll(self, ev: dict) -> None:
        service, rid = self.requests[ev["request"]]
        status = self.dep.service(service).poll(rid)
        want = ev.get("expect", "Approved")
        self.check("control", f"poll-{ev['request']}", status == want, f"status {status}")

    def op_query(self, ev: dict) -> None:
        """Ask the cloud directly for items, bypassing the client's local key check."""
        client = self.dep.service(ev["service"])
        msg = {"type": wire.QUERY, "owner_id": self.dep.owner, "stream_id": ev["stream"],
               "epochs": ev["epochs"], "instance_id": client.ring.instance_id}
        try:
            got = f"{len(client.link.call(msg, wire.QUERY_RESULT)['items'])} items"
        except SensorCloudError as exc:
            got = exc.code
        want = ev.get("expect", "AccessDenied")
        self.check(ev.get("verdict", "b"), f"query-{ev['stream']}", got == want, f"{got} (expected {want})")

    def _fetch(self, ev: dict):
        client = self.dep.service(ev["service"])
        lo, hi = ev["epochs"]
        return client, client.fetch_decrypt(self.dep.owner, ev["stream"], (lo, hi))

    def op_fetch(self, ev: dict) -> None:
        want = ev.get("expect", "ok")
        stream = ev["stream"]
        verdict = ev.get("verdict", "e2e" if want == "ok" else {"IntegrityFailure": "c", "ChainBreak": "d"}
                         .get(want, "b"))
        try:
            _, views = self._fetch(ev)
        except SensorCloudError as exc:
            seq = getattr(exc, "seq", None)
            detail = exc.code + (f" at seq {seq}" if seq is not None else "")
            ok = exc.code == want and ("seq" not in ev or seq == ev["seq"])
            self.check(verdict, f"fetch-{stream}", ok, detail)
            return
        if want != "ok":
            self.check(verdict, f"fetch-{stream}", False, f"{len(views)} items verified, expected {want}")
            return
        lo, hi = ev["epochs"]
        expected = [policy_view(r, self.policy(stream)) for r in self.truth_range(stream, lo, hi)]
        got = [canonical.dumps(v.to_dict()) for v in views]
        same = got == [canonical.dumps(v.to_dict()) for v in expected] and len(got) > 0
        self.check(verdict, f"fetch-{stream}", same,
                   f"{len(got)} of {len(expected)} views bit-identical to ground truth" if same
                   else f"{len(got)} views differ from {len(expected)} ground-truth readings")

    def op_sample_app(self, ev: dict) -> None:
        """Run the service's sample app as its own process and compare with ground truth."""
        name, stream, window = ev["service"], ev["stream"], int(ev.get("window", 5))
        ring = self.dep.rings[name]
        held = ring.epochs(self.dep.owner, stream)
        env = dict(os.environ)
        env["PYTHONPATH"] = str(Path(sensorcloud.__file__).resolve().parent.parent)
        proc = subprocess.run(
            [sys.executable, "-m", "sensorcloud.service", "--cloud-endpoint", self.dep.svc_shim.endpoint,
             "--identity-file", str(ring.path), "--stream", f"{self.dep.owner}/{stream}", "--window", str(window)],
            capture_output=True, text=True, env=env, timeout=60)
        # the subprocess advanced the chain cursors on disk; keep the in-process ring in step
        self.dep.rings[name] = type(ring).load(ring.path)
        values = [r.value for r in self.truth_range(stream, held[0], held[-1])] if held else []
        want = [repr(v) for v in rolling_average(values, window)] if values else []
        got = proc.stdout.split()
        ok = proc.returncode == 0 and got == want and bool(want)
        self.check("e2e", f"sample-app-{stream}", ok,
                   f"{len(got)} rolling averages match ground truth" if ok
                   else f"exit {proc.returncode}, {len(got)} lines vs {len(want)}: {proc.stderr.strip()[:200]}")

    # --- storage-layer attacks ---------------------------------------------------------------

    def _edit_log(self, stream: str, edit: Callable[[list[bytes]], list[bytes]]) -> None:
        path = self.dep.stream_file(stream)

        def apply() -> None:
            lines = [ln for ln in path.read_bytes().splitlines() if ln.strip()]
            path.write_bytes(b"".join(ln + b"\n" for ln in edit(lines)))

        self.dep.restart_cloud(apply)

    def op_tamper_byte(self, ev: dict) -> None:
        index = int(ev["index"])

        def flip(lines: list[bytes]) -> list[bytes]:
            raw = bytearray(lines[index])
            i = raw.index(b'"ciphertext":"') + len(b'"ciphertext":"') + int(ev.get("offset", 0))
            raw[i] = ord("0") if raw[i] != ord("0") else ord("1")
            lines[index] = bytes(raw)
            return lines

        self._edit_log(ev["stream"], flip)

    def op_delete_item(self, ev: dict) -> None:
        index = int(ev["index"])
        self._edit_log(ev["stream"], lambda lines: lines[:index] + lines[index + 1:])

    def op_reorder_items(self, ev: dict) -> None:
        """A cloud serving items out of order: swap two adjacent query results before verification."""
        client = self.dep.service(ev["service"])
        lo, hi = ev["epochs"]
        items = client.fetch_items(self.dep.owner, ev["stream"], (lo, hi))
        i = int(ev["index"])
        items[i], items[i + 1] = items[i + 1], items[i]
        try:
            verify_chain(items, client.ring.key)
            self.check("d", f"reorder-{ev['stream']}", False, "reordered chain verified")
        except SensorCloudError as exc:
            pos = getattr(exc, "position", None)
            self.check("d", f"reorder-{ev['stream']}", exc.code == "ChainBreak" and pos == i,
                       f"{exc.code} at position {pos}")

    # --- wire attack -------------------------------------------------------------------

    def op_replay_frame(self, ev: dict) -> None:
        """Replay one trust-point -> cloud frame while the next batch uploads."""
        shim = self.dep.tp_shim
        fired_before = len(shim.fired)
        shim.add_attack(Attack("replay", C2S, int(ev.get("frame", 1)), connection=None))
        self.op_simulate({"ticks": ev.get("ticks", 5)})
        self.op_sync({})
        fired = len(shim.fired) > fired_before
        self.check("f", "replay-fired", fired, "shim replayed a frame" if fired else "attack never fired")
        log = self.dep.cloud.log_text()
        detected = "ReplayDetected" in log
        self.check("f", "replay-detected", detected,
                   "cloud closed the session with ReplayDetected" if detected else "no ReplayDetected in cloud log")
        self.op_check_complete({"verdict": "f"})

    # --- adversary views ---------------------------------------------------------------

    def op_dump_cloud(self, ev: dict) -> None:
        state = self.dep.operator_dump()
        max_epoch = max(self.epochs_now().values()) + 1
        blobs = [dump_bytes(state), self.dep.wire_bytes(), self.dep.cloud.log_text().encode()]
        prefix = sim.SENTINEL_PREFIX.encode()
        res = scan(blobs, prefix, self.sentinels, self.dep.secrets(max_epoch))
        self.report.metrics["scanned_bytes"] = res.scanned_bytes
        self.check("a", "sentinels", res.sentinel_hits == 0, f"{res.sentinel_hits} sentinel occurrences")
        self.check("a", "secrets", res.key_hits == 0, f"{res.key_hits} secret occurrences")
        need = int(ev.get("min_sentinels", 0))
        self.check("a", "planted", len(self.sentinels) >= need, f"{len(self.sentinels)} sentinel readings planted")
        # positive control: the same scanner does find sentinels and keys in home-side bytes
        truth_blob = b"".join(p.read_bytes() for p in sorted(self.dep.workdir.glob("truth-*.ndjson")))
        probe = self.sentinels[:16]
        ctl = scan([truth_blob, self.dep.tp_config.read_bytes()], prefix, probe, [self.dep.master_secret])
        live = ctl.sentinel_hits >= len(probe) and ctl.key_hits >= 1
        self.check("a", "scanner-live", live, "scanner detects planted bytes in home-side data" if live
                   else "scanner missed home-side sentinels or keys")

    def op_rogue_matrix(self, ev: dict) -> None:
        """Every access path an ungranted service could try, with the error it must get."""
        rogue = self.dep.service(ev["service"])
        iid = rogue.ring.instance_id
        victim = self.dep.rings[ev["victim"]].instance_id if ev.get("victim") else None
        owner = self.dep.owner
        last = max(self.epochs_now().values())
        attempts: list[tuple[str, dict, str]] = []
        for s in self.topology.streams:
            attempts.append((f"query-{s}", {"type": wire.QUERY, "owner_id": owner, "stream_id": s,
                                            "epochs": [0, last], "instance_id": iid}, "AccessDenied"))
        if victim:
            s = self.topology.streams[0]
            attempts += [
                ("query-as-victim", {"type": wire.QUERY, "owner_id": owner, "stream_id": s,
                                     "epochs": [0, 0], "instance_id": victim}, "AccessDenied"),
                ("read-victim-inbox", {"type": wire.FETCH_INBOX, "address": wire.instance_address(victim)},
                 "NotRegistered"),
                ("relay-as-victim", {"type": wire.RELAY, "to": wire.trust_point_address(owner), "body": "{}",
                                     "from_instance": victim}, "NotRegistered"),
                ("relay-to-victim", {"type": wire.RELAY, "to": wire.instance_address(victim), "body": "{}",
                                     "from_instance": iid}, "AccessDenied"),
            ]
        stored = self.dep.stored_items(self.topology.streams[0])
        if stored:
            attempts.append(("store", {"type": wire.STORE, "item": canonical.loads(stored[0])},
                             "NotTrustPointSession"))
        attempts += [
            ("read-owner-inbox", {"type": wire.FETCH_INBOX, "address": wire.trust_point_address(owner)},
             "AccessDenied"),
            ("self-grant", {"type": wire.GRANT_UPSERT, "entry": {
                "active": True, "epoch_end": None, "epoch_start": 0, "grant_id": "G999", "instance_id": iid,
                "owner_id": owner, "streams": self.topology.streams}}, "NotTrustPointSession"),
            ("lookup-service", {"type": wire.LOOKUP_SERVICE, "instance_id": iid}, "AccessDenied"),
            ("dump-state", {"type": wire.DUMP_STATE}, "AccessDenied"),
        ]
        for name, msg, want in attempts:
            try:
                rogue.link.call(msg)
                got = "accepted"
            except SensorCloudError as exc:
                got = exc.code
            self.check("b", name, got == want, f"{got} (expected {want})")
        for s in self.topology.streams:
            try:
                rogue.fetch_decrypt(owner, s, (0, last))
                got = "decrypted"
            except SensorCloudError as exc:
                got = exc.code
            self.check("b", f"fetch-{s}", got == "MissingKey", got)
        self.op_offline_decrypt({"service": ev["service"], "expect": "none", "verdict": "b"})

    def op_offline_decrypt(self, ev: dict) -> None:
        """Hand the service the full ciphertext log out of band and count what its keys open."""
        ring = self.dep.rings[ev["service"]]
        streams = [ev["stream"]] if "stream" in ev else self.topology.streams
        lo, hi = ev.get("epochs", [0, None])
        if ev.get("new_epochs"):
            # epochs created after the last revocation: the current ones
            now = self.epochs_now()
            items = [ProtectedDataItem.from_bytes(r) for s in streams for r in self.dep.stored_items(s)
                     if json.loads(r)["header"]["epoch"] == now[s]]
        else:
            items = [ProtectedDataItem.from_bytes(r) for s in streams for r in self.dep.stored_items(s)]
            items = [it for it in items if it.header.epoch >= lo and (hi is None or it.header.epoch <= hi)]
        opened, failed = decrypt_offline(items, ring)
        want = ev.get("expect", "none")
        verdict = ev.get("verdict", "b")
        name = "offline-" + "-".join(streams)
        if want == "none":
            ok = opened == 0 and failed == len(items) and len(items) > 0
            self.check(verdict, name, ok, f"opened {opened} of {len(items)} items")
            return
        same = self._matches_truth(items, ring)
        ok = failed == 0 and opened == len(items) == same and len(items) > 0
        self.check(verdict, name, ok, f"opened {opened} of {len(items)} items, {same} bit-identical to ground truth")

    def _matches_truth(self, items: list[ProtectedDataItem], ring) -> int:
        """How many items open to exactly the policy view of their ground-truth reading."""
        by_coord: dict[tuple[str, int, int], SensorReading] = {}
        for stream, rows in self.truth.items():
            seqs: dict[int, int] = {}
            for epoch, r in rows:
                seq = seqs.get(epoch, 0)
                seqs[epoch] = seq + 1
                by_coord[(stream, epoch, seq)] = r
        same = 0
        for it in items:
            h = it.header
            truth = by_coord.get((h.stream_id, h.epoch, h.seq))
            try:
                view = try_open(it, ring.key(h.owner_id, h.stream_id, h.epoch).key_bytes)
            except SensorCloudError:
                continue
            if truth is not None and canonical.dumps(view.to_dict()) == canonical.dumps(
                    policy_view(truth, self.policy(h.stream_id)).to_dict()):
                same += 1
        return same

    def op_check_flow(self, ev: dict) -> None:
        stats = self.dep.tp_command("status")["flow"]
        bad = stats["plaintext_bearing"]
        self.check("flow", "plaintext-bearing", bad == 0 and stats["messages"] > 0,
                   f"{bad} plaintext-bearing messages")


def run_scenario(scenario: dict[str, Any] | str | Path, workdir: Path | None = None) -> Report:
    if not isinstance(scenario, dict):
        scenario = load_scenario(scenario)
    return _Runner(scenario, workdir).run()
