from cofipara.data import synthetic_msd, synthetic_msti
from cofipara.rationale import MockClient, generate_for_phase
from cofipara.sample import Phase


def with_rationales(samples, phase):
    rats = generate_for_phase(samples, phase, MockClient())
    return [(s, rats[s.id]) for s in samples]


def msd_pairs(n=4, size=64, seed=0):
    return with_rationales(synthetic_msd(n, size, seed), Phase.PRETRAIN)


def msti_pairs(n=4, size=64, seed=0):
    return with_rationales(synthetic_msti(n, size, seed), Phase.FINETUNE)
