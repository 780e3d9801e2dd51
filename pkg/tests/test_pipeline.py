import numpy as np
import pytest

from imbtrader.data_io import reference_layout
from imbtrader.pipeline import TrainedModels, make_forecaster, train_models
from imbtrader.price_models import forecast as full_forecast


class TestTrainModels:
    def test_bundle_contents(self, trained, small_market):
        cfg, _, truth = small_market
        models, train_ticks, _ = trained
        assert models.n_q == 12
        assert models.grid == cfg.grid
        assert models.layout == reference_layout()
        assert models.train_start == train_ticks[0].timestamp
        assert models.train_end == train_ticks[-1].timestamp
        assert models.position_model.position_weight_index == train_ticks[0].x.shape[0]
        # mild noise: sensitivities land near the planted slopes
        assert models.impact.k_mdp == pytest.approx(truth["k_mdp"], abs=0.05)
        assert models.impact.k_mip == pytest.approx(truth["k_mip"], abs=0.05)

    def test_attach_z_fills_probabilities(self, trained):
        models, _, test_ticks = trained
        for tick in test_ticks[:20]:
            assert tick.z.shape == (1,)
            assert 0.0 < tick.z[0] < 1.0

    def test_empty_ticks_rejected(self, small_market):
        cfg, _, _ = small_market
        with pytest.raises(ValueError):
            train_models([], grid=cfg.grid)


class TestForecaster:
    def test_closure_matches_full_forecast(self, trained):
        models, _, test_ticks = trained
        tick = test_ticks[10]
        for beta_est in (0.0, 0.5, 1.0):
            fn = make_forecaster(models, tick, beta_est)
            impact = models.impact_with_beta(beta_est)
            for u in (-3.0, 0.0, 0.1, 5.0):
                fast = fn(u)
                slow = full_forecast(
                    models.position_model, models.bank_mdp, models.bank_mip,
                    tick.x, tick.z, tick.o, u, impact,
                )
                assert fast.pi == slow.pi
                assert fast.down == slow.down
                assert fast.up == slow.up

    def test_flattened_forecast_is_valid_distribution(self, trained):
        models, _, test_ticks = trained
        fn = make_forecaster(models, test_ticks[0], 1.0)
        flat = fn(2.5).flatten()
        assert abs(float(flat.masses.sum()) - 1.0) <= 1e-9
        assert np.all(np.diff(flat.values) > 0)

    def test_requires_z(self, trained, small_market):
        models, _, _ = trained
        _, raw_ticks, _ = small_market
        with pytest.raises(ValueError):
            make_forecaster(models, raw_ticks[0], 1.0)


class TestSerialization:
    def test_save_load_round_trip(self, trained, tmp_path):
        models, _, test_ticks = trained
        path = tmp_path / "models.json"
        models.save(path)
        restored = TrainedModels.load(path)
        assert restored.train_start == models.train_start
        assert restored.train_end == models.train_end
        assert restored.impact == models.impact
        assert restored.layout == models.layout
        tick = test_ticks[3]
        fn_a = make_forecaster(models, tick, 1.0)
        fn_b = make_forecaster(restored, tick, 1.0)
        fa, fb = fn_a(1.5), fn_b(1.5)
        assert fa.pi == fb.pi
        assert fa.down == fb.down and fa.up == fb.up

    def test_version_checked(self, trained, tmp_path):
        models, _, _ = trained
        path = tmp_path / "models.json"
        models.save(path)
        doc = path.read_text().replace('"format_version": 1', '"format_version": 99')
        path.write_text(doc)
        with pytest.raises(ValueError, match="version"):
            TrainedModels.load(path)
