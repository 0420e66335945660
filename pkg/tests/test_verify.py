from artipose.verify import (
    check_group_laws,
    check_metric_oracles,
    check_min_of_n,
    check_mst,
    check_quantize,
    random_model,
)


def test_individual_checks_pass(tetrahedral):
    assert check_group_laws(tetrahedral).passed
    assert check_quantize(tetrahedral, samples=200).passed
    assert check_min_of_n(tetrahedral).passed
    assert check_mst(cases=30).passed
    assert check_metric_oracles().passed


def test_random_model_is_a_three_part_chain(rng):
    model = random_model(rng)
    assert model.num_parts == 3
    assert [(j.parent, j.child) for j in model.ordered_joints()] == [(0, 1), (1, 2)]

