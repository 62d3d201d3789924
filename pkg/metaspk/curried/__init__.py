"""
Alternate namespace for metaspk where the pipeline functions are curried

Example:

    ``der_score`` takes a reference and a hypothesis.  Fixing the reference
    gives a scorer for competing hypotheses of one session
    >>> from metaspk.curried import der_score
    >>> from metaspk import RttmSegment
    >>> ref = [RttmSegment('s', 0.0, 4.0, 'A')]
    >>> score = der_score(ref)
    >>> score([RttmSegment('s', 0.0, 4.0, 'x')]).der
    0.0

    Settings can be bound first and the data supplied later, e.g. in a map
    >>> segment = uniform_segment(width=1.0, step=0.5)
    >>> segment([(0.0, 2.0)])
    [(0.0, 1.0), (0.5, 1.5), (1.0, 2.0)]

See Also:
    toolz.curry
"""
import toolz

import metaspk
from metaspk import (
    DerBreakdown,
    DiarizeConfig,
    EncoderSpec,
    FeatureMatrix,
    MfccConfig,
    RttmSegment,
    RunConfig,
    TrainConfig,
    Waveform,
    cosine_affinity,
    length_normalize,
    read_embeddings,
    read_features,
    read_manifest,
    read_rttm,
    read_trials,
    speech_regions,
)

ahc_cluster = toolz.curry(metaspk.ahc_cluster)
aggregate_der = toolz.curry(metaspk.aggregate_der)
binarize_affinity = toolz.curry(metaspk.binarize_affinity)
compute_mfcc = toolz.curry(metaspk.compute_mfcc)
der_score = toolz.curry(metaspk.der_score)
diarize_session = toolz.curry(metaspk.diarize_session)
embed = toolz.curry(metaspk.embed)
embed_batch = toolz.curry(metaspk.embed_batch)
evaluate_trials = toolz.curry(metaspk.evaluate_trials)
fit_lda = toolz.curry(metaspk.fit_lda)
fit_plda = toolz.curry(metaspk.fit_plda)
lr_schedule = toolz.curry(metaspk.lr_schedule)
nme_sc = toolz.curry(metaspk.nme_sc)
nme_search = toolz.curry(metaspk.nme_search)
plda_score_matrix = toolz.curry(metaspk.plda_score_matrix)
project_labels = toolz.curry(metaspk.project_labels)
sample_episode = toolz.curry(metaspk.sample_episode)
score_trials = toolz.curry(metaspk.score_trials)
sliding_cmn = toolz.curry(metaspk.sliding_cmn)
smoothed_losses = toolz.curry(metaspk.smoothed_losses)
spectral_cluster = toolz.curry(metaspk.spectral_cluster)
uniform_segment = toolz.curry(metaspk.uniform_segment)
write_features = toolz.curry(metaspk.write_features)
write_rttm = toolz.curry(metaspk.write_rttm)
