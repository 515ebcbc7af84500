"""Phantom study: generate, extract, train, predict, evaluate.

The grade is a deterministic function of the generated geometry, so a forest
trained on one phantom draw should recover the grades of another almost
perfectly.
"""

import io

from koos.config import runtime_config
from koos.features import write_dataset
from koos.forest import ForestParams, predict, save_model, train
from koos.metrics import evaluate
from koos.phantom import generate_dataset


def _records(per_grade, seed, threads=1):
    return [record for _, record in generate_dataset(per_grade, seed, threads=threads)]


def _csv(records):
    sink = io.StringIO()
    write_dataset(records, sink)
    return sink.getvalue()


def test_phantom_study_recovers_grades():
    threads = runtime_config.threads
    training = _records(100, seed=1, threads=threads)
    testing = _records(25, seed=2, threads=threads)
    params = ForestParams(n_trees=1000, max_depth=5, min_samples_leaf=2, seed=0)

    model = train(training, params, threads=threads)
    report = evaluate((predict(model, r.features), r.grade) for r in testing)

    assert report.n_cases == 100
    assert report.ma_mae <= 0.10


def test_pipeline_bytes_do_not_depend_on_thread_count():
    outputs = []
    for threads in (1, 2):
        training = _records(3, seed=10, threads=threads)
        testing = _records(2, seed=20, threads=threads)
        model = train(training, ForestParams(n_trees=50, seed=3), threads=threads)
        predictions = [predict(model, r.features) for r in testing]
        report = evaluate(zip(predictions, (r.grade for r in testing)))
        outputs.append((_csv(training), save_model(model), predictions, report.to_json()))

    assert outputs[0] == outputs[1]
