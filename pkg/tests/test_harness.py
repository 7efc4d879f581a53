import numpy as np
import pytest

from fedftg.config import ConfigError, ExperimentConfig, parse_config, parse_config_text, parse_variants
from fedftg.harness import (
    BUILTIN_VARIANTS,
    CSV_HEADER,
    RunAborted,
    initial_server_state,
    load_data,
    read_metrics,
    rounds_to_target,
    run_experiment,
    run_matrix,
    select_clients,
)

SMALL = """
[dataset]
classes = 3
train_per_class = 30
test_per_class = 20
dims = 4
spread = 0.3
[partition]
clients = 4
[federation]
rounds = 3
fraction = 0.5
optimizer = fedavg
[local]
epochs = 1
batch_size = 10
[model]
hidden = 8
gen_hidden = 8
noise_dim = 4
[server]
iterations = 2
dist_steps = 2
batch_size = 8
"""


@pytest.fixture
def small():
    return parse_config_text(SMALL)


# --- configuration ------------------------------------------------------------


def test_empty_config_gives_standard_defaults():
    cfg = parse_config_text("")
    assert (cfg.rounds, cfg.clients, cfg.fraction, cfg.epochs, cfg.batch_size) == (1000, 100, 0.1, 5, 50)
    assert (cfg.lambda_cls, cfg.lambda_dis) == (1.0, 1.0)
    assert (cfg.iterations, cfg.gen_steps, cfg.dist_steps) == (10, 1, 5)
    assert (cfg.lr, cfg.gen_lr, cfg.decay, cfg.weight_decay) == (0.1, 0.01, 0.998, 1e-3)
    assert cfg == ExperimentConfig()


def test_fraction_out_of_range_names_line():
    with pytest.raises(ConfigError) as err:
        parse_config_text("[federation]\nrounds = 4\nfraction = 1.5\n")
    assert err.value.line == 3
    assert str(err.value).startswith("line 3:")


@pytest.mark.parametrize("text, line", [
    ("[local]\nepochs = 2\nmomentum = 0.9\n", 3),
    ("[server]\nhsm = maybe\n", 2),
    ("[nowhere]\nx = 1\n", 2),
    ("rounds = 3\n", 1),
    ("[local]\nepochs\n", 2),
])
def test_bad_lines_are_reported(text, line):
    with pytest.raises(ConfigError) as err:
        parse_config_text(text)
    assert err.value.line == line


def test_round_trip_is_idempotent(tmp_path):
    cfg = parse_config_text("[server]\nlambda_cls = 0.5\n[partition]\nbeta = iid\n")
    again = parse_config_text(cfg.dump())
    assert again == cfg
    assert again.lambda_cls == 0.5 and again.beta is None
    (tmp_path / "c.ini").write_text(cfg.dump())
    assert parse_config(tmp_path / "c.ini").digest() == cfg.digest()


def test_comments_and_overrides(small):
    cfg = parse_config_text("# header\n[federation] \nrounds = 7  ; trailing\n")
    assert cfg.rounds == 7
    assert small.with_overrides({"server.hsm": "off"}).hsm is False
    with pytest.raises(ConfigError):
        small.with_overrides({"server.nope": "1"})


def test_builtin_variants_parse(small, tmp_path):
    for overrides in BUILTIN_VARIANTS.values():
        small.with_overrides(overrides)
    (tmp_path / "v.ini").write_text("[plain]\n[no-hsm]\nserver.hsm = false\n")
    assert parse_variants(tmp_path / "v.ini") == {"plain": {}, "no-hsm": {"server.hsm": "false"}}


def test_clients_per_round_is_ceiling():
    assert parse_config_text("[partition]\nclients = 10\n[federation]\nfraction = 0.25\n").clients_per_round == 3
    assert parse_config_text("[partition]\nclients = 7\n[federation]\nfraction = 0.01\n").clients_per_round == 1


# --- rounds to target and selection -----------------------------------------------


def test_rounds_to_target_examples():
    assert rounds_to_target([0.1, 0.5, 0.9], 0.5) == 2
    assert rounds_to_target([0.1, 0.5, 0.9], 0.99) is None
    assert rounds_to_target([0.1, 0.5, 0.9], 0.1) == 1


def test_selection_is_distinct_and_uniform():
    hits = np.zeros(100)
    for t in range(10_000):
        sel = select_clients(100, 10, seed=3, round_index=t)
        assert sel.size == np.unique(sel).size == 10
        hits[sel] += 1
    freq = hits / 10_000
    assert np.all(np.abs(freq - 0.1) <= 0.015)


# --- runs ---------------------------------------------------------------------------


def test_serial_runs_are_byte_identical(small, tmp_path):
    a = run_experiment(small, out_dir=tmp_path / "a")
    run_experiment(small, out_dir=tmp_path / "b")
    csv_a = (tmp_path / "a" / "metrics.csv").read_bytes()
    assert csv_a == (tmp_path / "b" / "metrics.csv").read_bytes()
    lines = csv_a.decode().splitlines()
    assert lines[0] == ",".join(CSV_HEADER)
    assert len(lines) - 1 == small.rounds == len(a.metrics)
    assert parse_config(tmp_path / "a" / "config.ini").digest() == a.config_hash
    assert all(0.0 <= m.test_acc <= 1.0 for m in a.metrics)
    assert [m.test_acc for m in read_metrics(tmp_path / "a" / "metrics.csv")] == a.accuracies


def test_threaded_run_matches_serial(small):
    serial = run_experiment(small)
    threaded = run_experiment(small, serial=False, max_workers=2)
    assert threaded.params.values.tobytes() == serial.params.values.tobytes()
    assert threaded.accuracies == serial.accuracies


@pytest.mark.parametrize("optimizer", ["fedprox", "scaffold", "feddyn"])
def test_every_optimizer_runs(small, optimizer):
    report = run_experiment(small.with_overrides({"federation.optimizer": optimizer}))
    assert len(report.metrics) == small.rounds
    assert np.all(np.isfinite(report.params.values))


def test_one_round_with_zero_learning_rates_keeps_initial_model(small):
    cfg = small.with_overrides({"federation.rounds": "1", "local.lr": "0", "server.lr": "0"})
    report = run_experiment(cfg)
    train, _ = load_data(cfg)
    assert report.params == initial_server_state(cfg, train.dim, train.num_classes).params


def test_zero_distillation_lr_matches_plain_federated_averaging(small):
    tuned = run_experiment(small.with_overrides({"server.lr": "0"}))
    plain = run_experiment(small.with_overrides({"federation.finetune": "false"}))
    assert tuned.params.values.tobytes() == plain.params.values.tobytes()


def test_single_client_full_participation_matches_local_training():
    # oracle (seeds 0-4, spread 0.3, 5 rounds): fine-tuned and plain runs agree to the last test example
    cfg = parse_config_text(
        "[dataset]\nspread = 0.3\ntrain_per_class = 100\ntest_per_class = 100\n"
        "[partition]\nclients = 1\n[federation]\nrounds = 5\nfraction = 1.0\noptimizer = fedavg\n"
        "[model]\nnoise_dim = 16\n")
    for seed in range(2):
        on = run_experiment(cfg.with_overrides({"run.seed": str(seed)})).final_accuracy
        off = run_experiment(cfg.with_overrides({"run.seed": str(seed), "federation.finetune": "false"})).final_accuracy
        assert abs(on - off) <= 0.01


def test_targets_are_reported(small):
    report = run_experiment(small, targets=[0.0, 1.01])
    assert report.rounds_to_target == {0.0: 1, 1.01: None}


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_aborts_with_round_and_partial_report(small, tmp_path):
    cfg = small.with_overrides({"local.lr": "1e200"})
    with pytest.raises(RunAborted) as err:
        run_experiment(cfg, out_dir=tmp_path)
    assert err.value.divergence
    assert err.value.round == 1
    assert err.value.report.error.startswith("round 1")


def test_matrix_single_row_equals_run(small, tmp_path):
    rows = run_matrix(small, {"full": {}}, [5], out_path=tmp_path / "m.csv")
    assert len(rows) == 1
    assert rows[0].accuracies == (run_experiment(small.with_overrides({"run.seed": "5"})).final_accuracy,)
    assert rows[0].std == 0.0
    assert (tmp_path / "m.csv").read_text().splitlines()[0] == "variant,mean_acc,std_acc,seed_5"


def test_all_off_variant_wires_flags(small):
    cfg = small.with_overrides(BUILTIN_VARIANTS["-hsm&cls&abe"])
    hyper = cfg.hyper()
    assert (hyper.hsm, hyper.cls_sampling, hyper.class_ensemble) == (False, False, False)
