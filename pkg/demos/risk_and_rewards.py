"""
Risk score and rewards
======================

The cardiovascular reward is the drop in 10-year risk between encounters.
Glycemic and blood-pressure rewards weight each drop by how far above a
normal level the patient started.
"""
import numpy as np

from regimenrl import risk
from regimenrl import rewards as rw

woman = risk.FrsInput(age=61, sex="female", total_cholesterol=180, hdl=47, sbp=124,
                      bp_treated=False, smoker=True, diabetic=False)
man = risk.FrsInput(age=53, sex="male", total_cholesterol=161, hdl=55, sbp=125,
                    bp_treated=True, smoker=False, diabetic=True)
print(f"61-year-old female smoker: {risk.frs_risk(woman):.2f}%")
print(f"53-year-old treated diabetic male: {risk.frs_risk(man):.2f}%")

# risk rises with systolic pressure
for sbp in (110, 130, 150, 170):
    x = risk.FrsInput(**{**man.__dict__, "sbp": sbp})
    print(f"  sbp {sbp}: {risk.frs_risk(x):5.2f}%")

# the same one-point A1c drop is worth more from a higher start
for start in (6.0, 7.0, 8.0, 10.0):
    print(f"A1c {start:4.1f} -> {start - 1:4.1f}: reward {rw.glycemia_reward(start, start - 1):.3f}")
print("A1c 6.0 -> 5.5 (crosses normal):", rw.glycemia_reward(6.0, 5.5))
print("SBP 150 -> 140:", round(rw.bp_reward(150, 140), 4))

grid = np.array([[rw.bp_reward(s, s + d) for d in (-20, -10, 0, 10)] for s in (130, 150, 170)])
print("bp reward, rows start 130/150/170, cols change -20/-10/0/+10:")
print(np.round(grid, 2))
