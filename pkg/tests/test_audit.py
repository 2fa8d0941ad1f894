import json

import numpy as np
import pytest

from emotts.audit import (
    AuditItem,
    RaterTable,
    audit_metrics,
    balanced_select,
    mos_and_balanced_select,
    mos_band,
    synthetic_audit_items,
)


class TestRaterTable:
    def test_grid_enforced(self):
        with pytest.raises(ValueError):
            RaterTable(item_ids=["a"], ratings=np.array([[2.25]]))
        with pytest.raises(ValueError):
            RaterTable(item_ids=["a"], ratings=np.array([[5.5]]))

    def test_shape_checks(self):
        with pytest.raises(ValueError):
            RaterTable(item_ids=["a", "b"], ratings=np.array([[3.0]]))

    def test_mos_is_mean(self):
        table = RaterTable(item_ids=["a"], ratings=np.array([[3.0, 3.5, 4.0]]))
        assert table.mos().tolist() == [3.5]


class TestBands:
    def test_nearest_level_banding(self):
        assert mos_band(1.0) == 1
        assert mos_band(1.49) == 1
        assert mos_band(1.5) == 2
        assert mos_band(2.49) == 2
        assert mos_band(4.49) == 4

    def test_top_band_reaches_down_to_half(self):
        assert mos_band(4.5) == 5
        assert mos_band(5.0) == 5

    def test_out_of_range(self):
        with pytest.raises(ValueError):
            mos_band(0.5)


class TestBalancedSelect:
    def _pool(self, per_band=25):
        ids, scores = [], []
        for band in range(1, 5):
            for i in range(per_band):
                ids.append(f"b{band}-{i:02d}")
                scores.append(band + (i % 2) * 0.4)
        for i in range(per_band):
            ids.append(f"b5-{i:02d}")
            scores.append(5.0)
        return ids, scores

    def test_hundred_items_twenty_per_band(self):
        ids, scores = self._pool()
        chosen = balanced_select(ids, scores, bucket_size=20)
        assert len(chosen) == 100
        bands = {b: 0 for b in range(1, 6)}
        lookup = dict(zip(ids, scores))
        for item in chosen:
            bands[mos_band(lookup[item])] += 1
        assert set(bands.values()) == {20}

    def test_underfilled_band_named(self):
        with pytest.raises(ValueError, match="band 1"):
            balanced_select(["a", "b"], [5.0, 5.0], bucket_size=1)

    def test_selection_is_deterministic(self):
        ids, scores = self._pool()
        assert balanced_select(ids, scores, 10) == balanced_select(ids, scores, 10)

    def test_mos_and_balanced_select(self):
        table = RaterTable(
            item_ids=[f"i{k}" for k in range(10)],
            ratings=np.array([[float(b)] * 3 for b in (1, 1, 2, 2, 3, 3, 4, 4, 5, 5)]),
        )
        per_item, chosen = mos_and_balanced_select(table, bucket_size=2)
        assert per_item["i0"] == 1.0
        assert len(chosen) == 10


class TestAudit:
    def _items(self, metric_fn, n_systems=4, per_system=6):
        items = []
        import math

        for s in range(n_systems):
            for i in range(per_system):
                mos = 1.0 + (s * per_system + i) * 3.5 / (n_systems * per_system)
                on_grid = math.floor(mos * 2) / 2
                items.append(
                    AuditItem(
                        item_id=f"s{s}-i{i}",
                        system=f"s{s}",
                        human_mos=mos,
                        metric_scores={"m": metric_fn(mos)},
                        judge_ratings={"judge": [on_grid, on_grid + 0.5]},
                    )
                )
        return items

    def test_noise_free_monotone_metric_has_unit_rho(self):
        report = audit_metrics(self._items(lambda m: m ** 3))
        row = next(r for r in report.rows if r.name == "m")
        assert row.sentence_rho == 1.0
        assert row.system_rho == 1.0
        assert row.sd is None

    def test_anti_monotone_metric(self):
        report = audit_metrics(self._items(lambda m: -m))
        row = next(r for r in report.rows if r.name == "m")
        assert row.sentence_rho == -1.0

    def test_judges_get_stability_column(self):
        report = audit_metrics(self._items(lambda m: m))
        row = next(r for r in report.rows if r.name == "judge")
        assert row.sd == pytest.approx(0.25)

    def test_report_shape_and_render(self):
        report = audit_metrics(self._items(lambda m: m), seed=5)
        raw = json.loads(report.to_json())
        assert raw["n_systems"] == 4 and raw["seed"] == 5
        rendered = report.render()
        assert "System-rho" in rendered.splitlines()[0]
        assert len(rendered.splitlines()) == 2 + len(report.rows)

    def test_too_few_items_rejected(self):
        with pytest.raises(ValueError):
            audit_metrics(self._items(lambda m: m)[:1])


class TestSyntheticPool:
    def test_generator_shape(self):
        items, table = synthetic_audit_items(seed=0, n_systems=3, items_per_system=5)
        assert len(items) == 15
        assert table.ratings.shape[0] == 15
        assert {i.system for i in items} == {"sys0", "sys1", "sys2"}

    def test_quality_signal_recoverable(self):
        items, _ = synthetic_audit_items(seed=1)
        report = audit_metrics(items)
        row = next(r for r in report.rows if r.name == "emo_sim")
        # The synthetic metric tracks quality with mild noise.
        assert row.sentence_rho > 0.7
        assert row.system_rho > 0.9
        judge = next(r for r in report.rows if r.name == "judge_rating")
        assert judge.sd is not None and judge.sd > 0

    def test_deterministic(self):
        a, _ = synthetic_audit_items(seed=9)
        b, _ = synthetic_audit_items(seed=9)
        assert [(i.item_id, i.human_mos, i.metric_scores) for i in a] == [
            (i.item_id, i.human_mos, i.metric_scores) for i in b
        ]
