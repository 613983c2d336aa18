from tafmnet.gradsuite import TOLERANCE, iter_cases, run_suite


def test_op_and_loss_cases_pass():
    results = run_suite(seed=1, include_model=False)
    names = [r.name for r in results]
    assert len(names) == len(set(names))
    failed = [(r.name, r.max_rel_error) for r in results if not r.passed]
    assert not failed
    assert all(r.max_rel_error < TOLERANCE for r in results)


def test_model_cases_are_listed():
    names = [name for name, *_ in iter_cases(include_model=True)]
    assert any(n.startswith("model") for n in names)
