"""Regenerate the example configs in this directory."""

import cmath
import json
import math
import pathlib
import re

HERE = pathlib.Path(__file__).parent
SM = [[[0, 0], [1, 0]], [[0, 0], [0, 0]]]


def c(z):
    z = complex(z)
    return [round(z.real, 15) + 0.0, round(z.imag, 15) + 0.0]


def mat(rows):
    return [[c(x) for x in r] for r in rows]


def kron(a, b):
    return [[a[i][j] * b[k][l] for j in range(len(a)) for l in range(len(b))]
            for i in range(len(a)) for k in range(len(b))]


def term(alpha, beta, gamma, num, den=1):
    return {"alpha": alpha, "beta": beta, "gamma": c(gamma), "delay": {"num": num, "den": den}}


def qubit(omega, kernel, t_final, grid, command, extra=None, unit="tau"):
    cfg = {
        "time_unit": unit,
        "subsystems": [{"name": "A", "dim": 2}],
        "hamiltonian": mat([[0, omega], [omega, 0]]),
        "couplings": {"A": SM},
        "kernel": kernel,
        "initial_state": "ground",
        "t_final": t_final,
        "grid": grid,
        "command": command,
    }
    cfg.update(extra or {})
    return cfg


def multi_loop(n_loops, gamma, phi, tau):
    """Zero-delay gamma plus 2 gamma (1 - n/N) e^{i n phi} at n tau."""
    kernel = [term("A", "A", gamma, 0)]
    for n in range(1, n_loops):
        kernel.append(term("A", "A", 2 * gamma * (1 - n / n_loops) * cmath.exp(1j * n * phi), n * tau))
    return kernel


def infinite_loop(gamma, phi, tau, n_max):
    kernel = [term("A", "A", gamma, 0)]
    for n in range(1, n_max + 1):
        kernel.append(term("A", "A", 2 * gamma * cmath.exp(1j * n * phi), n * tau))
    return kernel


def fig1(omega, kernel):
    obs = [{"name": "n_excitation", "op": "n:A"}]
    return qubit(omega, kernel, 5.0, 201, {
        "evolve": {"observables": obs},
        "oracle": {"lindblad": {"observables": obs}},
    })


def backscatter(ab, ba):
    gamma, phi, omega, tau = 5.0, math.pi / 2, 5.0, 1
    i2 = [[1, 0], [0, 1]]
    sm = [[0, 1], [0, 0]]
    a = kron(sm, i2)
    b = kron(i2, sm)
    e = cmath.exp(1j * phi)
    h = [[omega * (a[i][j] + a[j][i] + e * b[i][j] + e.conjugate() * b[j][i]) for j in range(4)] for i in range(4)]
    obs = [{"name": "n_excitation_A", "op": "n:A"}, {"name": "n_excitation_B", "op": "n:B"}]
    return {
        "time_unit": "tau",
        "subsystems": [{"name": "A", "dim": 2}, {"name": "B", "dim": 2}],
        "hamiltonian": mat(h),
        "couplings": {"A": SM, "B": SM},
        "kernel": [
            term("A", "A", gamma, 0),
            term("B", "B", gamma, 0),
            term("B", "A", gamma * e, ab * tau),
            term("A", "B", gamma * e, ba * tau),
        ],
        "initial_state": "ground",
        "t_final": 4.0 * tau,
        "grid": 161,
        "command": {"evolve": {"observables": obs}},
    }


def dump(cfg):
    text = json.dumps(cfg, indent=2)
    # Keep numeric pairs and matrix rows on one line.
    num = r"-?\d+(?:\.\d+)?(?:e-?\d+)?"
    text = re.sub(r"\[\s*(%s),\s*(%s)\s*\]" % (num, num), r"[\1, \2]", text)
    text = re.sub(r"\[\s*((?:\[%s, %s\],\s*)*\[%s, %s\])\s*\]" % (num, num, num, num),
                  lambda m: "[" + re.sub(r",\s+", ", ", m.group(1)) + "]", text)
    return text + "\n"


def main():
    # Figures 1 and 2 measure time in units of tau, with gamma tau = 5.
    gamma, tau, pi = 5.0, 1, math.pi
    single = [term("A", "A", gamma, 0), term("A", "A", gamma * cmath.exp(1j * pi), tau)]
    configs = {
        "fig1a": fig1(0.25 * gamma, single),
        "fig1d": fig1(gamma, multi_loop(3, gamma, pi, tau)),
        "fig1g": fig1(gamma, multi_loop(4, gamma, pi, tau)),
        # Round trips beyond the fourth cannot act within five intervals.
        "fig1j": fig1(gamma, infinite_loop(gamma, pi, tau, 4)),
        "fig2a": backscatter(1, 1),
        "fig2d": backscatter(1, 2),
        "fig3": qubit(pi, [term("A", "A", 1.0, 0), term("A", "A", 1.0, 1)], 6.0, 61, {
            "g2": {"output": "A", "t1": [0.5 * k for k in range(10)], "lags": 31, "phases": [0.0, pi]},
        }, unit="1/gamma"),
        "teleport": qubit(gamma, single, 1.5, 2, {"teleport": {"t": 1.5, "mode": "postselect", "samples": 1000, "seed": 7}}),
        "dde": qubit(0.0, single, 3.0, 61, {"oracle": {"dde": {}}}, {"initial_state": "excited"}),
    }
    for name, cfg in configs.items():
        (HERE / f"{name}.json").write_text(dump(cfg))


if __name__ == "__main__":
    main()
