"""A Bayes problem solved through its Lagrangian form.

With prior ``pi``, losses ``w`` and per-observation cost ``c`` the Bayes test is
the Lagrange-optimal test for ``lambda_ij = pi_i w_ij`` and stage cost
``c pi``, and its Bayes risk is that test's Lagrangian.  The last case makes
sampling so expensive that deciding at once is optimal.
"""
from seqctl.criteria import BayesSpec, bayes_to_lagrange
from seqctl.evaluate import exact_eval
from seqctl.model import coin2
from seqctl.policy import Policy
from seqctl.value import r0, solve_rho, trivial_verdict


def main():
    model = coin2()
    for prior, cost in (([0.5, 0.5], 1.0), ([0.9, 0.1], 1.0), ([0.5, 0.5], 40.0)):
        b = BayesSpec(prior, [[0, 200], [200, 0]], cost)
        spec = bayes_to_lagrange(b)
        table = solve_rho(model, spec)
        verdict = trivial_verdict(model, spec, table)
        print(f"prior {prior}, cost {cost}")
        if verdict.trivial_optimal:
            print(f"  {verdict.describe()}")
            continue
        rep = exact_eval(model, Policy(model, spec, table), spec, bayes=b)
        print(f"  Bayes risk {rep.bayes_risk:.5f}, lower bound c + R_0 = {cost + r0(model, spec, table):.5f}")
        print(f"  ASN {rep.asn.round(3).tolist()}, errors {rep.beta.round(5).tolist()}")


if __name__ == "__main__":
    main()
