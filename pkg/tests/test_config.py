"""
Chain and experiment configuration.

Core claims:
    - invalid values are rejected with the dotted path of the offending field
    - the master seed seeds the chain unless the chain sets its own
    - CLI overrides win over the file and skip None
"""

import json

import pytest

from qssep_lab.config import ChainConfig, ExperimentConfig, default_workers, load_config, log_home
from qssep_lab.errors import ConfigError


class TestChainConfig:
    def test_open_chain(self):
        cfg = ChainConfig.open_chain(10, 0.2, 0.7)
        assert cfg.rates == pytest.approx((0.2, 0.8, 0.7, 0.3))
        assert cfg.n_a == pytest.approx(0.2)
        assert cfg.n_b == pytest.approx(0.7)
        assert cfg.edge_count == 9

    def test_periodic_edges(self):
        assert ChainConfig(N=5, topology="periodic").edge_count == 5

    @pytest.mark.parametrize("kwargs, path", [
        ({"N": 1}, "chain.N"),
        ({"topology": "ring"}, "chain.topology"),
        ({"dt": 0.0}, "chain.dt"),
        ({"topology": "open", "alpha1": -1.0}, "chain.alpha1"),
        ({"topology": "open"}, "chain"),
        ({"alpha1": 0.5}, "chain.topology"),
    ])
    def test_invalid(self, kwargs, path):
        with pytest.raises(ConfigError) as exc:
            ChainConfig(**kwargs)
        assert exc.value.path == path

    def test_from_dict_coerces_numbers(self):
        cfg = ChainConfig.from_dict({"N": 4.0, "topology": "open", "alpha1": 1, "betaN": 1})
        assert cfg.N == 4 and isinstance(cfg.N, int)
        assert isinstance(cfg.alpha1, float)

    def test_from_dict_type_errors(self):
        with pytest.raises(ConfigError, match="chain.N"):
            ChainConfig.from_dict({"N": 2.5})
        with pytest.raises(ConfigError, match="chain.N"):
            ChainConfig.from_dict({"N": True})
        with pytest.raises(ConfigError, match="chain.dt"):
            ChainConfig.from_dict({"dt": "small"})

    def test_round_trip(self):
        cfg = ChainConfig.open_chain(6, seed=3)
        assert ChainConfig.from_dict(cfg.to_dict()) == cfg


class TestExperimentConfig:
    def test_seed_propagates_to_chain(self):
        cfg = ExperimentConfig.from_dict({"name": "x", "seed": 7, "chain": {"N": 3}})
        assert cfg.chain.seed == 7
        own = ExperimentConfig.from_dict({"name": "x", "seed": 7, "chain": {"N": 3, "seed": 1}})
        assert own.chain.seed == 1

    def test_unknown_field(self):
        with pytest.raises(ConfigError) as exc:
            ExperimentConfig.from_dict({"name": "x", "chain": {"N": 3, "sites": 4}})
        assert exc.value.path == "chain.sites"
        with pytest.raises(ConfigError) as exc:
            ExperimentConfig.from_dict({"name": "x", "samples": 4})
        assert exc.value.path == "samples"

    def test_validation(self):
        with pytest.raises(ConfigError, match="name"):
            ExperimentConfig(name="")
        with pytest.raises(ConfigError, match="ensemble_size"):
            ExperimentConfig(name="x", ensemble_size=0)
        with pytest.raises(ConfigError, match=r"estimators\[1\]"):
            ExperimentConfig(name="x", estimators=["loop", "magic"])
        with pytest.raises(ConfigError, match=r"estimators\[0\]"):
            ExperimentConfig(name="x", estimators=["hciz"])
        with pytest.raises(ConfigError, match="workers"):
            ExperimentConfig(name="x", workers=0)

    def test_document_must_be_object(self):
        with pytest.raises(ConfigError):
            ExperimentConfig.from_dict([1, 2])

    def test_overrides(self):
        cfg = ExperimentConfig.from_dict({"name": "x", "chain": {"N": 3}, "params": {"sites": "1,2"}})
        out = cfg.with_overrides(seed=5, chain_N=6, ensemble_size=None, params={"sites": None, "h": "const:1"})
        assert out.seed == 5
        assert out.chain.N == 6
        assert out.chain.seed == 5
        assert out.ensemble_size == cfg.ensemble_size
        assert out.params == {"sites": "1,2", "h": "const:1"}

    def test_invalid_override(self):
        cfg = ExperimentConfig(name="x")
        with pytest.raises(ConfigError, match="chain.N"):
            cfg.with_overrides(chain_N=1)


class TestLoading:
    def test_load(self, tmp_path):
        path = tmp_path / "run.json"
        path.write_text(json.dumps({"name": "ks", "chain": {"N": 2}, "estimators": ["loop"], "workers": 2}))
        cfg = load_config(str(path))
        assert cfg.name == "ks"
        assert cfg.estimators == ["loop"]
        assert cfg.workers == 2

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError, match="not found"):
            load_config(str(tmp_path / "missing.json"))

    def test_bad_json(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text("{\"name\": ")
        with pytest.raises(ConfigError) as exc:
            load_config(str(path))
        assert exc.value.path == "$"

    def test_environment(self, monkeypatch, tmp_path):
        monkeypatch.setenv("QSSEP_WORKERS", "3")
        assert default_workers() == 3
        monkeypatch.setenv("QSSEP_WORKERS", "many")
        assert default_workers() == 1
        monkeypatch.setenv("QSSEP_HOME", str(tmp_path))
        assert log_home() == str(tmp_path)
