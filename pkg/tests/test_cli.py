import json

import pytest

from atomicbench import reporting, topology
from atomicbench.cli import main

pytestmark = pytest.mark.usefixtures("host_desc")  # skip without topology


def run_cli(capsys, *argv):
    code = main(list(argv))
    out = capsys.readouterr()
    return code, out.out, out.err


class TestDetect:
    def test_prints_description(self, capsys):
        code, out, _ = run_cli(capsys, "detect")
        assert code == 0
        data = json.loads(out)
        assert set(data) >= {"cores", "line_size", "levels", "dies",
                             "sockets", "protocol", "hugepage_size"}

    def test_save_round_trips(self, capsys, tmp_path):
        p = tmp_path / "host.json"
        code, _, _ = run_cli(capsys, "detect", "--save", str(p))
        assert code == 0
        desc = topology.load(p)
        assert topology.to_json(desc) == p.read_text()


class TestBenchCommands:
    def test_latency_writes_rows(self, capsys, tmp_path):
        out_file = tmp_path / "lat.csv"
        code, out, _ = run_cli(
            capsys, "latency", "--op", "cas-fail", "--state", "M",
            "--placement", "L1", "--buffer-size", "8192", "--reps", "3",
            "--no-verify-placement", "--out", str(out_file),
        )
        assert code == 0
        assert "median=" in out and "ns/op" in out
        rows = reporting.parse(out_file)
        assert len(rows) == 1
        assert rows[0].operation == "CAS-fail"
        assert rows[0].samples == 3

    def test_latency_verifies_placement_by_default(self, capsys, tmp_path):
        out_file = tmp_path / "lat.csv"
        code, out, _ = run_cli(
            capsys, "latency", "--op", "read", "--state", "E",
            "--buffer-size", "8192", "--reps", "2", "--out", str(out_file),
        )
        assert code == 0
        row = reporting.parse(out_file)[0]
        assert row.placement_verified in (True, False)
        assert "placement-" in out

    def test_bandwidth_json_output(self, capsys, tmp_path):
        out_file = tmp_path / "bw.json"
        code, out, _ = run_cli(
            capsys, "bandwidth", "--op", "faa", "--buffer-size", "65536",
            "--reps", "2", "--output", "json", "--no-verify-placement",
            "--out", str(out_file),
        )
        assert code == 0
        assert "GB/s" in out
        rows = reporting.parse(out_file)
        assert rows[0].unit == "bytes/s"

    def test_contend_thread_count(self, capsys, tmp_path):
        out_file = tmp_path / "contend.csv"
        code, out, _ = run_cli(
            capsys, "contend", "--op", "faa", "--threads", "2",
            "--duration-ms", "12", "--reps", "2", "--no-verify-placement",
            "--out", str(out_file),
        )
        assert code == 0
        row = reporting.parse(out_file)[0]
        assert row.n_threads == 2
        assert row.kernel == "contend"

    def test_machine_file_flag(self, capsys, tmp_path, host_desc):
        # a saved host description feeds back in as --machine
        mfile = tmp_path / "m.json"
        topology.save(host_desc, mfile)
        code, out, _ = run_cli(
            capsys, "latency", "--op", "read", "--machine", str(mfile),
            "--buffer-size", "8192", "--reps", "2", "--no-verify-placement",
        )
        assert code == 0


class TestModelCommands:
    def test_predict_breakdown(self, capsys, tmp_path):
        mfile = tmp_path / "haswell.json"
        topology.save(topology.builtin_machine("haswell"), mfile)
        code, out, _ = run_cli(
            capsys, "predict", "--machine", str(mfile), "--params", "haswell",
            "--op", "CAS", "--state", "E", "--level", "L1",
            "--locality", "same-core",
        )
        assert code == 0
        assert "5.8700 ns" in out
        assert "read-for-ownership" in out

    def test_predict_bandwidth(self, capsys, tmp_path):
        mfile = tmp_path / "haswell.json"
        topology.save(topology.builtin_machine("haswell"), mfile)
        code, out, _ = run_cli(
            capsys, "predict", "--machine", str(mfile), "--params", "haswell",
            "--op", "FAA", "--state", "M", "--level", "L1",
            "--locality", "same-core", "--pattern", "sequential",
            "--bandwidth",
        )
        assert code == 0
        assert "9.4535 GB/s" in out

    def test_fit_from_results_and_compare(self, capsys, tmp_path):
        # synthesize rows from the reference params, fit, then compare
        from atomicbench.model import (
            CoherencyState, Level, ModelQuery, Op, builtin_params, latency,
        )
        from atomicbench.topology import LocalityClass as LC

        desc = topology.builtin_machine("haswell")
        params = builtin_params("haswell")
        mfile = tmp_path / "m.json"
        topology.save(desc, mfile)

        def row(op, bench_op, state, level, loc, owner, kernel="lat-chase"):
            from test_reporting import make_row

            q = ModelQuery(op, CoherencyState(state), Level(level), LC(loc))
            return make_row(kernel=kernel, operation=bench_op, state=state,
                            level=level, locality=loc, owner=owner,
                            median=latency(q, params, desc), samples=7)

        rows = [
            row(Op.READ, "read", "E", "L1", "same-core", 0),
            row(Op.READ, "read", "E", "L2", "same-core", 0),
            row(Op.READ, "read", "E", "L3", "same-core", 0),
            row(Op.CAS, "CAS-fail", "E", "L1", "same-core", 0),
            row(Op.FAA, "FAA", "E", "L1", "same-core", 0),
            row(Op.SWP, "SWP", "E", "L1", "same-core", 0),
        ]
        # a memory read row (state I)
        from test_reporting import make_row

        qmem = ModelQuery(Op.READ, CoherencyState.E, Level.MEMORY,
                          LC.SAME_CORE)
        rows.append(make_row(operation="read", state="I", level="memory",
                             locality="same-core",
                             median=latency(qmem, params, desc), samples=7))
        results = tmp_path / "rows.csv"
        reporting.emit(rows, "csv", results)

        fitted = tmp_path / "fitted.json"
        code, out, _ = run_cli(
            capsys, "fit", str(results), "--machine", str(mfile),
            "--out", str(fitted),
        )
        assert code == 0
        from atomicbench.model import load_params

        got = load_params(fitted)
        assert got.r_l1 == pytest.approx(1.17)
        assert got.mem == pytest.approx(65.0, rel=1e-9)

        code, out, _ = run_cli(
            capsys, "compare", str(results), "--machine", str(mfile),
            "--params", str(fitted),
        )
        assert code == 0
        assert "0 group(s) above" in out


class TestSimulateCommand:
    def test_replay_trace(self, capsys, tmp_path):
        trace = tmp_path / "t.trace"
        trace.write_text("0 write 1\n1 read 1\n0 atomic 1\n" * 10)
        code, out, _ = run_cli(
            capsys, "simulate", "--protocol", "MOESI", "--dies", "2",
            "--cores-per-die", "2", "--trace", str(trace),
        )
        assert code == 0
        stats = json.loads(out)
        assert stats["events"] == 30
        assert stats["remote_die_invalidations"] > 0

    def test_olsl_variant(self, capsys, tmp_path):
        trace = tmp_path / "t.trace"
        trace.write_text("0 write 1\n1 read 1\n0 atomic 1\n" * 10)
        code, out, _ = run_cli(
            capsys, "simulate", "--protocol", "MOESI+OLSL", "--dies", "2",
            "--cores-per-die", "2", "--trace", str(trace),
        )
        stats = json.loads(out)
        assert stats["remote_die_invalidations"] == 0


class TestBfsCommand:
    def test_small_traversal(self, capsys, tmp_path):
        out_file = tmp_path / "bfs.json"
        code, out, _ = run_cli(
            capsys, "bfs", "--scale", "8", "--edgefactor", "8",
            "--seed", "1", "--claim", "swp", "--workers", "2",
            "--out", str(out_file),
        )
        assert code == 0
        assert "VALID" in out
        data = json.loads(out_file.read_text())
        assert data["valid"] is True
        assert data["teps"] > 0
