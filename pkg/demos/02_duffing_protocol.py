"""The full identification protocol on the synthetic forced-Duffing lab.

1. simulate nine multisine training periods and a noise validation record
2. fit the 55-term polynomial NARX reference by equation error
3. decouple it with r = 4 branches (filtered CPD and curvature method)
4. refine both by output error and compare validation errors

The script takes around a minute on one core.

Run:  python3 demos/02_duffing_protocol.py
"""

import time

from narxdecouple import LabConfig, fit_pnarx, generate_training, generate_validation
from narxdecouple.narx import simulation_error
from narxdecouple.pipeline import decouple_cell

cfg = LabConfig()
training = generate_training(cfg)
validation = generate_validation(cfg)
print(f"{len(training)} training records of {len(training[0])} samples, "
      f"validation {len(validation)} samples, SNR {cfg.snr_db} dB")

ref = fit_pnarx([r.u for r in training], [r.y for r in training])
print(f"reference P-NARX: {ref.n_params} coefficients, "
      f"validation e_rms {simulation_error(ref, [validation]):.3f} %\n")

print("method    params  e_f [%]  val before [%]  val after [%]  time")
for method, lam in (("fcpd", 10.0), ("hessian", 1.0)):
    t0 = time.perf_counter()
    cell = decouple_cell(ref, training, [validation], 4, lam, method)
    print(f"{method:8s}  {cell.model.n_params:6d}  {cell.e_f:7.3f}  {cell.e_rms_val_pre:14.3f}  "
          f"{cell.e_rms_val_post:13.3f}  {time.perf_counter() - t0:4.1f} s")
