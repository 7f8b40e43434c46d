#!/usr/bin/env python3
"""Write the bundled AlGaAs coefficient table with frozen reference indices.

The reference rows are evaluated here, independently of the Rust code, from
the Afromowitz (1974) single-oscillator expressions with Varshni-shifted gaps.
Rust tests compare against these rows.

usage: gen_dispersion_table.py --cross-section CM2 > algaas_afromowitz.json
"""
import argparse
import json
import math

HC_EV_NM = 1239.841984

COEFFS = {
    "kind": "afromowitz",
    "e0_ev": [3.65, 0.871, 0.179],
    "ed_ev": [36.1, -2.45],
    "eg_ev": [1.424, 1.266, 0.26],
    "reference_temperature_k": 300.0,
    "varshni_alpha_ev_per_k": 5.405e-4,
    "varshni_beta_k": 204.0,
    "e0_temperature_coefficient_ev_per_k": -4.0e-4,
    "edge_broadening_ev": 0.01,
}


def index(x, lam_nm, t_k, c=COEFFS):
    e = HC_EV_NM / lam_nm
    e0 = c["e0_ev"][0] + c["e0_ev"][1] * x + c["e0_ev"][2] * x * x
    e0 += c["e0_temperature_coefficient_ev_per_k"] * (t_k - c["reference_temperature_k"])
    ed = c["ed_ev"][0] + c["ed_ev"][1] * x
    a, b = c["varshni_alpha_ev_per_k"], c["varshni_beta_k"]
    tr = c["reference_temperature_k"]
    eg = c["eg_ev"][0] + c["eg_ev"][1] * x + c["eg_ev"][2] * x * x
    eg -= a * t_k * t_k / (t_k + b) - a * tr * tr / (tr + b)
    ef2 = 2 * e0 * e0 - eg * eg
    eta = math.pi * ed / (2 * e0 ** 3 * (e0 * e0 - eg * eg))
    w = 2 * eg * c["edge_broadening_ev"]
    log_term = math.log(abs(ef2 - e * e)) - 0.5 * math.log((eg * eg - e * e) ** 2 + w * w)
    eps = 1 + ed / e0 + ed * e * e / e0 ** 3 + eta * e ** 4 / math.pi * log_term
    return math.sqrt(eps)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--cross-section", type=float, required=True,
                    help="free-carrier absorption per carrier at 1570 nm (cm^2)")
    args = ap.parse_args()
    rows = []
    for x in (0.0, 0.11, 0.25, 0.45, 0.80, 1.0):
        for lam in (785.0, 1100.0, 1570.0, 1900.0):
            for t in (292.0, 310.0):
                rows.append({"x": x, "wavelength_nm": lam, "temperature_k": t,
                             "n": round(index(x, lam, t), 6)})
    table = {
        "schema_version": 1,
        "name": "AlGaAs Afromowitz single oscillator, Varshni thermal shift",
        "units": {"wavelength": "nm", "temperature": "K", "loss": "cm^-1"},
        "model": COEFFS,
        "validity": {"wavelength_nm": [700.0, 2100.0], "temperature_k": [250.0, 350.0],
                     "composition_x": [0.0, 1.0]},
        "free_carrier_loss": {
            "undoped_alpha_cm1": 0.1,
            "cross_section_cm2": args.cross_section,
            "reference_wavelength_nm": 1570.0,
            "wavelength_exponent": 2.0,
        },
        "reference_points": rows,
    }
    print(json.dumps(table, indent=2))


if __name__ == "__main__":
    main()
