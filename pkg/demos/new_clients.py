"""
Serving clients that never took part in training
================================================

A client that arrives after training has only the shared units. Two
strategies are available: fit fresh personalized units on the newcomer's own
data with the shared units frozen (LocalTrain), or average the predictions of
all existing personalized models (Ensemble).
"""

# %%
import numpy as np

from fedfac.datagen import SynthConfig, generate_synthetic_federation
from fedfac.facsplit import FactorConfig
from fedfac.federation import (
    FederationConfig,
    predict_new_client_ensemble,
    predict_new_client_localtrain,
    run_experiment,
)
from fedfac.numerics import derive_rng

data, _ = generate_synthetic_federation(SynthConfig(C=35, d=40, m=60, seed=2))
train, held = data[:30], data[30:]
cfg = FederationConfig(algorithm="fedfac_dynamic", T=15, eta_l=0.1, hidden_widths=(60,),
                       init_scale=1 / np.sqrt(40), seed=2, factor=FactorConfig(kappa=0.9, tau="q0.5"))
res = run_experiment(cfg, train)
members = list(res.clients.values())

# %%
# ``epochs=0`` keeps the fresh personalized draw untouched and serves as the
# baseline.
print("client  baseline  localtrain  ensemble")
for ds in held:
    base, _ = predict_new_client_localtrain(res.model, res.server, ds, 0, 0.1, derive_rng(2, [("new", ds.client_id)]))
    lt, _ = predict_new_client_localtrain(res.model, res.server, ds, 20, 0.1, derive_rng(2, [("new", ds.client_id)]),
                                          batch_size=50)
    en = predict_new_client_ensemble(res.model, members, ds)
    print(f"{ds.client_id:6d}  {base.accuracy:8.3f}  {lt.accuracy:10.3f}  {en.accuracy:8.3f}")
