"""Distill teacher attributions into a calibrated, retrievable case base.

The pipeline: discretize raw feature values onto a half-step interval grid
and average the teacher's per-feature attributions within each interval
(:mod:`.haga`); convert those means into exact probability contributions
(:mod:`.cacs`); calibrate per-case feature weights against the teacher's
probabilities under a reward signal (:mod:`.calibration`, :mod:`.policy`);
store calibrated cases in an embeddable knowledge base with grouped retrieval
(:mod:`.knowledge_base`); and classify unseen cases by precedent-conditioned
weighting with voting (:mod:`.prediction`). :mod:`.evaluation` holds the
metric arithmetic and a synthetic teacher with closed-form attributions.
"""

__version__ = "0.1.0"
