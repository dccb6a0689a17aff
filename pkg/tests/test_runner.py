import dataclasses
import json
import math
import os

import numpy as np
import pytest

from groupalign import (
    DomainSpec,
    EvalRecord,
    ExperimentConfig,
    FixedCount,
    MetricsTrace,
    RadiusThreshold,
    SweepRow,
    TopologySpec,
    make_preset,
    report,
    sweep_tau,
    train,
    write_sweep_csv,
)
from groupalign.runner import PRESETS, SMOOTH_GAMMA


def tiny_spec(m=4, c=2, sigma=0.5, shift_axis=None, shift_mag=0.0, props=(4, 8), noise=0.0):
    means = 3.0 * np.eye(c, m)
    shift = np.zeros(m)
    if shift_axis is not None:
        shift[shift_axis] = shift_mag
    return DomainSpec(
        class_means=means,
        class_cov_scale=sigma,
        shift=shift,
        proposals_per_image=props,
        class_mix=np.full(c, 1.0 / c),
        label_noise=noise,
    )


def tiny_config(**overrides):
    defaults = dict(
        source_specs=(tiny_spec(),),
        target_spec=tiny_spec(shift_axis=1, shift_mag=1.0),
        lr_schedule=((30, 1e-3),),
        eval_every=10,
        n_train_images=16,
        n_eval_images=8,
        adapter_hidden=(8,),
        disc_hidden=(8,),
        stop=RadiusThreshold(0.8),
    )
    defaults.update(overrides)
    return ExperimentConfig(**defaults)


def rows_equal(a, b):
    if len(a) != len(b):
        return False
    for ra, rb in zip(a, b):
        if len(ra) != len(rb):
            return False
        for va, vb in zip(ra, rb):
            both_nan = isinstance(va, float) and isinstance(vb, float) and math.isnan(va) and math.isnan(vb)
            if not both_nan and va != vb:
                return False
    return True


class TestConfig:
    def test_defaults_and_accessors(self):
        cfg = tiny_config()
        assert cfg.n_sources == 1
        assert cfg.feature_dim == 4
        assert cfg.n_classes == 2
        assert cfg.total_steps == 30

    def test_validation(self):
        with pytest.raises(ValueError):
            tiny_config(alignment="cyclegan")
        with pytest.raises(ValueError):
            tiny_config(mode="groups")
        with pytest.raises(ValueError):
            tiny_config(metric="euclidean")
        with pytest.raises(TypeError):
            tiny_config(stop=0.8)
        with pytest.raises(ValueError):
            tiny_config(lam1=-0.1)
        with pytest.raises(ValueError):
            tiny_config(margin=0.0)
        with pytest.raises(ValueError):
            tiny_config(grl_lam=-1.0)
        with pytest.raises(ValueError):
            tiny_config(lr_schedule=())
        with pytest.raises(ValueError):
            tiny_config(lr_schedule=((0, 1e-3),))
        with pytest.raises(ValueError):
            tiny_config(eval_every=0)
        with pytest.raises(ValueError):
            tiny_config(max_steps=0)
        with pytest.raises(ValueError):
            tiny_config(topology=TopologySpec(n_sources=2))  # one spec given
        with pytest.raises(ValueError):
            tiny_config(target_spec=tiny_spec(m=6))  # dim mismatch
        with pytest.raises(ValueError):
            tiny_config(target_spec=tiny_spec(c=3))  # class count mismatch

    def test_lr_schedule(self):
        cfg = tiny_config(lr_schedule=((3, 0.1), (2, 0.01)))
        assert [cfg.lr_at(s) for s in range(6)] == [0.1, 0.1, 0.1, 0.01, 0.01, 0.01]
        assert cfg.total_steps == 5
        longer = tiny_config(lr_schedule=((3, 0.1), (2, 0.01)), max_steps=9)
        assert longer.total_steps == 9
        assert longer.lr_at(8) == 0.01  # final rate persists

    def test_dict_round_trip(self):
        cfg = tiny_config(
            alignment="contrastive",
            mode="sg",
            stop=FixedCount(3),
            lam1=0.2,
            symmetrize_contrastive=True,
            topology=TopologySpec.from_name("separated", 1),
            max_steps=44,
        )
        back = ExperimentConfig.from_dict(cfg.to_dict())
        assert json.dumps(back.to_dict(), sort_keys=True) == json.dumps(cfg.to_dict(), sort_keys=True)
        radius = tiny_config(stop=RadiusThreshold(0.6))
        again = ExperimentConfig.from_dict(radius.to_dict())
        assert again.stop == RadiusThreshold(0.6)

    def test_from_dict_rejects_unknown_stop(self):
        payload = tiny_config().to_dict()
        payload["stop"] = {"kind": "silhouette"}
        with pytest.raises(ValueError):
            ExperimentConfig.from_dict(payload)


class TestTraceTypes:
    def make_record(self, step):
        return EvalRecord(
            step=step,
            lr=1e-3,
            loss_det=1.0,
            loss_img=0.5,
            loss_inst=0.25,
            loss_total=1.075,
            n_groups_source=(3,),
            n_groups_target=4,
            smoothed_groups_source=(3.0,),
            smoothed_groups_target=4.0,
            disc_acc_image=(0.5,),
            disc_acc_instance=(0.5,),
            source_accuracy=(0.9,),
            target_accuracy=0.7,
            centroid_gaps=(1.0, 2.0),
        )

    def test_steps_must_increase(self):
        cfg = tiny_config()
        MetricsTrace(cfg, (self.make_record(1), self.make_record(2)))
        with pytest.raises(ValueError):
            MetricsTrace(cfg, (self.make_record(2), self.make_record(2)))

    def test_final_requires_records(self):
        with pytest.raises(ValueError):
            MetricsTrace(tiny_config(), ()).final

    def test_columns_scale_with_sources(self):
        cfg = tiny_config(
            source_specs=(tiny_spec(), tiny_spec()),
            topology=TopologySpec.from_name("separated", 2),
        )
        cols = MetricsTrace(cfg, ()).columns()
        assert "n_groups_source_1" in cols
        assert "disc_acc_image_1" in cols
        assert "disc_acc_instance_1" in cols
        assert "source_accuracy_1" in cols
        assert cols.count("target_accuracy") == 1


class TestTrain:
    def test_trace_shape_and_ranges(self):
        trace = train(tiny_config())
        assert [r.step for r in trace.records] == [10, 20, 30]
        cols = trace.columns()
        for row in trace.rows():
            assert len(row) == len(cols)
        final = trace.final
        assert 0.0 <= final.target_accuracy <= 1.0
        assert all(0.0 <= a <= 1.0 for a in final.source_accuracy)
        assert final.n_groups_target >= 1
        assert final.loss_total == pytest.approx(
            final.loss_det + 0.1 * final.loss_img + 0.1 * final.loss_inst, abs=1e-12
        )
        assert all(np.isfinite(g) for g in final.centroid_gaps)

    def test_final_step_always_evaluated(self):
        trace = train(tiny_config(lr_schedule=((25, 1e-3),), eval_every=10))
        assert [r.step for r in trace.records] == [10, 20, 25]

    def test_deterministic_by_seed(self):
        cfg = tiny_config(seed=3)
        a = train(cfg)
        b = train(cfg)
        assert rows_equal(a.rows(), b.rows())
        c = train(tiny_config(seed=4))
        assert not rows_equal(a.rows(), c.rows())

    def test_zero_weights_make_alignments_identical(self):
        # with lam1 = lam2 = 0 neither mechanism touches anything
        adv = train(tiny_config(alignment="adversarial", lam1=0.0, lam2=0.0))
        con = train(tiny_config(alignment="contrastive", lam1=0.0, lam2=0.0))
        assert rows_equal(adv.rows(), con.rows())
        assert all(r.loss_img == 0.0 and r.loss_inst == 0.0 for r in adv.records)

    def test_alignment_changes_trajectory(self):
        base = train(tiny_config(lam1=0.0, lam2=0.0))
        adv = train(tiny_config())
        assert not rows_equal(base.rows(), adv.rows())

    def test_all_modes_and_alignments_run(self):
        for alignment in ("adversarial", "contrastive"):
            for mode in ("proposals", "sg", "mg", "mg_ca"):
                cfg = tiny_config(
                    alignment=alignment,
                    mode=mode,
                    lr_schedule=((8, 1e-3),),
                    eval_every=8,
                )
                trace = train(cfg)
                assert len(trace.records) == 1

    def test_iou_metric_runs(self):
        trace = train(tiny_config(metric="iou", stop=RadiusThreshold(0.7), lr_schedule=((8, 1e-3),), eval_every=8))
        assert len(trace.records) == 1

    def test_fixed_count_stop(self):
        trace = train(tiny_config(stop=FixedCount(2), lr_schedule=((8, 1e-3),), eval_every=8))
        assert trace.final.n_groups_target <= 2

    def test_proposals_mode_group_counts(self):
        trace = train(tiny_config(mode="proposals", lr_schedule=((8, 1e-3),), eval_every=8))
        # singleton groups: counts equal the sampled images' proposal counts
        assert trace.final.n_groups_target >= 4  # props lower bound

    def test_image_level_off(self):
        trace = train(tiny_config(image_level=False, lr_schedule=((8, 1e-3),), eval_every=8))
        assert all(r.loss_img == 0.0 for r in trace.records)

    def test_smoothing_initialized_then_decayed(self):
        cfg = tiny_config(lr_schedule=((2, 1e-3),), eval_every=1, n_train_images=2)
        trace = train(cfg)
        first, second = trace.records[0], trace.records[1]
        want = SMOOTH_GAMMA * first.smoothed_groups_target + (1 - SMOOTH_GAMMA) * second.n_groups_target
        assert second.smoothed_groups_target == pytest.approx(want, abs=1e-12)

    def test_single_source_topologies_bit_identical(self):
        rows = {}
        for name in ("shared", "sep_img", "sep_ins", "separated"):
            cfg = tiny_config(
                topology=TopologySpec.from_name(name, 1),
                lr_schedule=((12, 1e-3),),
                eval_every=6,
            )
            rows[name] = train(cfg).rows()
        for name in ("sep_img", "sep_ins", "separated"):
            assert rows_equal(rows["shared"], rows[name])


class TestReport:
    def test_files_and_round_trip(self, tmp_path):
        trace = train(tiny_config())
        csv_path, summary_path = report(trace, str(tmp_path / "out"))
        assert os.path.basename(csv_path) == "metrics.csv"
        assert os.path.basename(summary_path) == "summary.json"
        lines = open(csv_path).read().splitlines()
        header = lines[0].split(",")
        assert header == trace.columns()
        assert len(lines) == 1 + len(trace.records)
        for line, row in zip(lines[1:], trace.rows()):
            parsed = [float(v) for v in line.split(",")]
            assert parsed == [float(v) for v in row]  # repr round-trips exactly

    def test_summary_contents_and_schema(self, tmp_path):
        import jsonschema

        trace = train(tiny_config(seed=5))
        _, summary_path = report(trace, str(tmp_path / "out"))
        summary = json.load(open(summary_path))
        schema = json.load(
            open(os.path.join(os.path.dirname(os.path.dirname(__file__)), "src", "groupalign", "summary_schema.json"))
        )
        jsonschema.validate(summary, schema)
        assert summary["seed"] == 5
        assert summary["final"]["target_accuracy"] == trace.final.target_accuracy
        back = ExperimentConfig.from_dict(summary["config"])
        assert json.dumps(back.to_dict(), sort_keys=True) == json.dumps(trace.config.to_dict(), sort_keys=True)

    def test_nan_becomes_null(self, tmp_path):
        trace = train(tiny_config())
        rec = trace.final
        patched = dataclasses.replace(rec, centroid_gaps=(float("nan"), 1.0))
        doctored = MetricsTrace(trace.config, trace.records[:-1] + (patched,))
        _, summary_path = report(doctored, str(tmp_path / "out"))
        summary = json.load(open(summary_path))
        assert summary["final"]["centroid_gap_0"] is None
        assert summary["final"]["centroid_gap_1"] == 1.0

    def test_empty_trace_errors(self, tmp_path):
        with pytest.raises(ValueError):
            report(MetricsTrace(tiny_config(), ()), str(tmp_path))

    def test_rerun_byte_identical(self, tmp_path):
        cfg = tiny_config(seed=6)
        report(train(cfg), str(tmp_path / "a"))
        report(train(cfg), str(tmp_path / "b"))
        assert open(tmp_path / "a" / "metrics.csv", "rb").read() == open(tmp_path / "b" / "metrics.csv", "rb").read()
        assert open(tmp_path / "a" / "summary.json", "rb").read() == open(tmp_path / "b" / "summary.json", "rb").read()


class TestSweep:
    def test_radius_controls_group_count(self):
        base = tiny_config(lr_schedule=((10, 1e-3),), eval_every=10)
        rows = sweep_tau(base, [0.05, 1.5])
        assert rows[0].tau == 0.05
        assert rows[0].mean_group_count > rows[1].mean_group_count
        assert all(0.0 <= r.target_accuracy <= 1.0 for r in rows)

    def test_validation(self):
        with pytest.raises(ValueError):
            sweep_tau(tiny_config(stop=FixedCount(2)), [0.5])
        with pytest.raises(ValueError):
            sweep_tau(tiny_config(), [])

    def test_sweep_csv(self, tmp_path):
        rows = [SweepRow(0.4, 0.75, 11.0), SweepRow(0.8, 0.8, 3.5)]
        path = write_sweep_csv(rows, str(tmp_path / "sweep.csv"))
        lines = open(path).read().splitlines()
        assert lines[0] == "tau,target_accuracy,mean_group_count"
        assert len(lines) == 3
        with pytest.raises(ValueError):
            write_sweep_csv([], str(tmp_path / "empty.csv"))


class TestPresets:
    def test_all_presets_construct(self):
        for name in PRESETS:
            cfg = make_preset(name, seed=1)
            assert cfg.seed == 1
            assert cfg.total_steps > 0

    def test_unknown_preset(self):
        with pytest.raises(ValueError):
            make_preset("efficiency")

    def test_counts_presets_class_structure(self):
        assert make_preset("counts_c8").n_classes == 8
        assert make_preset("counts_c1").n_classes == 1

    def test_multisource_shape(self):
        cfg = make_preset("multisource")
        assert cfg.n_sources == 2
        assert cfg.topology.name == "shared"
