import pytest
from hypothesis import given
from hypothesis import strategies as st

from latticerf import kvtext
from latticerf.config import ConfigError, PipelineConfig

SAMPLE = """
# scan and layout
input.meta = "scan.txt"
input.raw = "scan.raw"
cell_dims = [40, 40, 1]
n_lags = [30, 30, 0]
output_dir = "run"
generate.count = 12
generate.seed = 7
qoi.kind = "youngs_modulus"
qoi.load_axis = 1
mlmc.rel_tol = 0.025
mlmc.confidence = 0.95
"""


class TestKVText:
    def test_loads_values(self):
        d = kvtext.loads('a = 1\nb = "x y"\n\n# c\nc = [1, 2.5]\nd = null\ne = true\n')
        assert d == {"a": 1, "b": "x y", "c": [1, 2.5], "d": None, "e": True}

    @pytest.mark.parametrize("text", ["a 1", "= 3", "a = 1\na = 2", "a = [1,"])
    def test_syntax_errors(self, text):
        with pytest.raises(kvtext.KVSyntaxError):
            kvtext.loads(text)

    def test_nest_conflict(self):
        with pytest.raises(kvtext.KVSyntaxError):
            kvtext.nest({"a": 1, "a.b": 2})

    @given(st.dictionaries(st.from_regex(r"[a-z_]{1,8}(\.[a-z_]{1,8})?", fullmatch=True),
                           st.one_of(st.integers(), st.floats(allow_nan=False, allow_infinity=False),
                                     st.text(max_size=10), st.booleans(), st.none()),
                           max_size=8))
    def test_round_trip(self, d):
        assert kvtext.loads(kvtext.dumps(d)) == d

    def test_dumps_rejects_nan(self):
        with pytest.raises(ValueError):
            kvtext.dumps({"a": float("nan")})


class TestPipelineConfig:
    def test_parse(self, tmp_path):
        cfg = PipelineConfig.from_text(SAMPLE, tmp_path)
        assert cfg.cell_dims == [40, 40, 1]
        assert cfg.generate.seed == 7
        assert cfg.qoi.setup().load_axis == 1
        assert cfg.mlmc.config().rel_tol == 0.025
        assert cfg.mlmc.config().confidence == 0.95
        assert cfg.out == tmp_path / "run"

    def test_round_trip(self):
        cfg = PipelineConfig.from_text(SAMPLE)
        again = PipelineConfig.from_text(cfg.to_text())
        assert again == cfg
        assert again.to_text() == cfg.to_text()
        assert again.digest() == cfg.digest()

    def test_digest_tracks_content(self):
        a = PipelineConfig.from_text(SAMPLE)
        b = PipelineConfig.from_text(SAMPLE.replace("generate.seed = 7", "generate.seed = 8"))
        assert a.digest() != b.digest()

    @pytest.mark.parametrize(
        "line",
        ['cell_dims = [40, 40]', 'fit_mode = "spline"', 'qoi.kind = "density"', "mlmc.rel_tol = 0",
         "bogus = 1", "mlmc.bogus = 1", "qoi.poisson = 0.6", "mlmc.confidence = 1.5", "generate = 3"],
    )
    def test_invalid(self, line):
        with pytest.raises(ConfigError):
            PipelineConfig.from_text(SAMPLE + line + "\n")

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError):
            PipelineConfig.load(tmp_path / "nope.txt")
