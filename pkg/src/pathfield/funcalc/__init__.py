"""Non-anticipative functionals of (t, omega, mu) and their derivatives."""
from .smooth import (Affine, CallableMap, ExpScalar, Polynomial, Sine, SmoothMap, constant,
                     identity, map_from_config, power)
from .dsl import (DerivativeBundle, DoubleMollified, FrozenEval, Functional, FunctionalSpec,
                  Leaf, MeasureComposite, MeasureEval, MeasureIntegral, OpaqueFunctional,
                  PathEval, RunningIntegral, constant_functional, example_composite, single)
from .fd import (FdConfig, batch_bundle, derivative_bundle, eval_functional, fd_bundle, fd_d_mu,
                 fd_d_omega, fd_dt, horizontal_derivative, measure_derivative,
                 strong_vertical_derivative)
from .corpus import CORPUS, DerivRow, corpus_functional, derivcheck, random_probe, summarize
