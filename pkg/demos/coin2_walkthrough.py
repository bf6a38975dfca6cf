"""Two coins, two hypotheses: solve, inspect, evaluate, and run one test by hand.

Under H_1 coin ``a`` lands heads with probability 0.5 and coin ``b`` with 0.1;
under H_2 the probabilities are 0.5 and 0.9.  Coin ``a`` carries no
information, so the optimal test should toss ``b`` every time.
"""
import numpy as np

from seqctl.criteria import LossSpec
from seqctl.evaluate import exact_eval, mc_eval
from seqctl.model import LikelihoodState, coin2
from seqctl.policy import Policy, decide, next_control, should_stop, step
from seqctl.value import r0, solve_rho


def main():
    model = coin2()
    spec = LossSpec.symmetric(2, 100.0)
    table = solve_rho(model, spec)
    print(f"value iteration: {table.iterations} sweeps, residual {table.residual:.2e}")
    print(f"R_0 = {r0(model, spec, table):.6f}, so no test beats L = {1 + r0(model, spec, table):.6f}")

    policy = Policy(model, spec, table)
    nodes = table.grid.nodes()
    stop, ctrl = policy.rules(nodes)
    cont = np.flatnonzero(~stop)
    lo, hi = np.exp(nodes[cont[[0, -1]], 0])
    print(f"continue while z in [{lo:.4g}, {hi:.4g}]")
    # the grid stops at log z = 25; its last few nodes see a truncated value
    # function, which can make the useless coin look better there
    inner = cont[nodes[cont, 0] < 20]
    edge = cont[nodes[cont, 0] >= 20]
    print(f"controls for log z < 20: {sorted({model.controls[c] for c in ctrl[inner]})}; "
          f"near the grid edge: {sorted({model.controls[c] for c in ctrl[edge]})}")

    print("\nexact operating characteristics")
    print(exact_eval(model, policy).format_table())
    print("\nMonte Carlo check (20000 replications)")
    print(mc_eval(model, policy, 20_000, seed=3).format_table())

    # one session: three tails in a row
    z = LikelihoodState.initial(2)
    for y in (0, 0, 0):
        if should_stop(policy, z):
            break
        x = next_control(policy, z)
        z = step(policy, z, y, x)
        print(f"toss {x} -> {y}: z = {np.exp(z.log_z)}")
    print(f"stop after {z.n} tosses, accept H_{decide(policy, z)}")


if __name__ == "__main__":
    main()
