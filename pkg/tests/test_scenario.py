import json

from gridtb.scenario import (
    baseline_variant,
    bundled_scenarios,
    canonical_json,
    load_scenario,
    validate,
)


def test_minimal_scenario_is_valid(minimal_doc):
    assert validate(minimal_doc) == []
    sc = load_scenario(minimal_doc)
    assert sc.seed == 1
    assert sc.raw["gis"]["refresh_s"] == 30
    assert sc.raw["rbs"][0]["max_active"] == 512


def test_unknown_vo_is_pointed_at(minimal_doc):
    minimal_doc["workloads"] = [{"name": "w", "vo": "lhcb", "jdl_template": 'Executable = "x";', "walltime_s": 1}]
    assert validate(minimal_doc) == ["/workloads/0/vo: unknown VO 'lhcb'"]


def test_all_schema_errors_are_reported(minimal_doc):
    minimal_doc["seed"] = -1
    minimal_doc["duration_h"] = "long"
    errors = validate(minimal_doc)
    assert len(errors) == 2
    assert {e.split(":")[0] for e in errors} == {"/seed", "/duration_h"}


def test_cross_reference_errors(minimal_doc):
    minimal_doc["replication_jobs"] = [{"lfn": "a", "vo": "atlas", "src": "nope", "dst": "nope2"}]
    minimal_doc["faults"] = [{"target": "ce:ghost", "kind": "restart-needed", "process": {"type": "poisson", "rate_per_day": 1}}]
    errors = validate(minimal_doc)
    assert "/replication_jobs/0/src: unknown SE 'nope'" in errors
    assert "/replication_jobs/0/dst: unknown SE 'nope2'" in errors
    assert any(e.startswith("/faults/0/target") for e in errors)


def test_bad_json_bytes():
    assert validate(b"{not json")[0].startswith("/: not valid JSON")


def test_hash_is_over_the_file_bytes(minimal_doc):
    raw = json.dumps(minimal_doc).encode()
    assert load_scenario(raw).scenario_hash == load_scenario(raw).scenario_hash
    assert load_scenario(raw).scenario_hash != load_scenario(raw + b" ").scenario_hash


def test_canonical_json_sorts_keys():
    assert canonical_json({"b": 1, "a": [2, 1]}) == '{"a":[2,1],"b":1}\n'


def test_bundled_scenarios_validate():
    found = bundled_scenarios()
    assert {"gass-cache-exhaustion", "cms-stress-replication", "rb-corruption-day", "one-day-migration"} <= set(found)
    for path in found.values():
        assert validate(path.read_bytes()) == [], path.name


def test_baseline_variant_strips_faults_and_stays_valid():
    for path in bundled_scenarios().values():
        doc = baseline_variant(json.loads(path.read_text()))
        assert doc["faults"] == [] and doc["actions"] == []
        assert validate(doc) == [], path.name
