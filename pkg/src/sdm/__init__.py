"""Bayesian off-policy evaluation and learning with structured priors.

Subpackage map:

* ``posterior`` - conjugate inference for the hierarchical and independent
  linear-Gaussian priors.
* ``logistic`` - binary-reward extension via a Gaussian likelihood
  approximation.
* ``policies`` - greedy/pessimistic/epsilon-greedy/uniform/softmax policies.
* ``estimators`` - DM, IPS, snIPS, DR, MIPS, PC and softmax policy search.
* ``envsim`` - synthetic environments and misspecification perturbations.
* ``metrics`` - Monte Carlo Bayesian metrics and bound evaluators.
* ``ingest`` - ratings matrices, factorization, clustering, prior building.
* ``learners`` - data-to-policy method catalog.
* ``harness`` - experiment configs, replication engine, report emission.
"""

__version__ = "0.1.0"
