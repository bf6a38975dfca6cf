"""Find multipliers whose optimal test has both error probabilities near 0.05.

After calibrating, scaling ``lambda_21`` up should only lower ``alpha_21``.
"""
import warnings

from seqctl.calibrate import PROBLEM_I, CalibrationTask, calibrate, error_monotonicity_probe
from seqctl.model import coin2


def main():
    model = coin2()
    task = CalibrationTask(PROBLEM_I, [[0, 0.05], [0.05, 0]])
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        res = calibrate(model, task)
    print(res.trace_csv())
    print(f"status: {res.status}, within 10% of targets: {res.within_band}, "
          f"both errors at most 0.05: {res.meets_constraints}")
    print(res.report.format_table())

    print("\nfactor  lambda_21  alpha_21")
    for row in error_monotonicity_probe(model, res.spec, (2, 1), (1, 2, 4, 8)):
        print(f"{row.factor:>6g}  {row.lam_ij:>9.4g}  {row.alpha_ij:.5f}")


if __name__ == "__main__":
    main()
