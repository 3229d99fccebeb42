"""Outer Newton driver tests for nonlinear Schwarz and NKS."""

import numpy as np
import pytest

from nlschwarz import assembly as asm
from nlschwarz import coarse as crs
from nlschwarz import mesh as msh
from nlschwarz.outer import (GmresParams, SolverConfig, beam_config,
                             ldc_config, solve_nks, solve_nonlinear_schwarz)
from nlschwarz.schwarz import NewtonParams
from nlschwarz.sparse import factorize

TIGHT = NewtonParams(rel_tol=1e-12, abs_tol=1e-14, max_iter=30)


def diffusion_case(nx=16, px=2, overlap=2):
    prob = asm.diffusion_problem()
    m = msh.build_structured_mesh(nx, nx, problem_kind="diffusion")
    dm = asm.build_dofmap(prob, m)
    dec = msh.partition_structured(m, px, px)
    msh.extend_overlap(dec, msh.dual_graph(m), overlap)
    msh.ghost_layer(dec, msh.nodal_graph(m), mesh=m)
    return prob, m, dm, dec


def coarse_space(prob, m, dm, dec, kind="rgdsw", modified=True):
    skel = msh.interface_skeleton(dec, m)
    u0 = asm.initial_iterate(prob, dm)
    A0 = asm.assemble_tangent(prob, m, dm, u0)
    P0, _, _ = crs.build_coarse_space(prob, m, dm, skel, A0, kind, modified,
                                      decomp=dec)
    return P0


def newton_reference(prob, m, dm, tol=1e-12):
    u = asm.initial_iterate(prob, dm)
    for _ in range(50):
        r = asm.assemble_residual(prob, m, dm, u)
        if np.linalg.norm(r) < tol:
            return u
        A = asm.assemble_tangent(prob, m, dm, u)
        u = u - factorize(A).solve(r)
    raise AssertionError("reference Newton did not converge")


class TestConfigs:
    def test_ldc_defaults(self):
        cfg = ldc_config()
        assert cfg.outer.rel_tol == 1e-6
        assert cfg.gmres.restart == 500
        assert cfg.outer.line_search

    def test_beam_defaults(self):
        cfg = beam_config()
        assert not cfg.outer.line_search
        assert not cfg.inner.line_search
        assert cfg.coarse_kind == "msfem"
        assert cfg.modified
        assert cfg.gmres.restart is None

    def test_overrides(self):
        cfg = ldc_config(variant="aspen", modified=True)
        assert cfg.variant == "aspen"
        assert cfg.modified


class TestNonlinearSchwarz:
    def test_matches_newton(self):
        prob, m, dm, dec = diffusion_case()
        u_ref = newton_reference(prob, m, dm)
        cfg = SolverConfig(outer=NewtonParams(rel_tol=1e-10, abs_tol=1e-12,
                                              max_iter=20),
                           inner=TIGHT, variant="raspen",
                           gmres=GmresParams(rel_tol=1e-10, max_iter=400))
        u, rep = solve_nonlinear_schwarz(prob, m, dm, dec, cfg)
        assert rep.converged
        assert np.abs(u - u_ref).max() < 1e-8

    def test_report_bookkeeping(self):
        prob, m, dm, dec = diffusion_case()
        cfg = SolverConfig(variant="raspen")
        u, rep = solve_nonlinear_schwarz(prob, m, dm, dec, cfg)
        assert rep.converged
        assert rep.residuals[0] == 1.0
        n = rep.outer_iterations
        assert len(rep.residuals) == n + 1
        assert len(rep.inner_iterations) == n
        assert len(rep.line_search_steps) == n
        assert len(rep.timing_history) == n
        assert set(rep.timings) == {"Inner solve", "Coarse solve", "GMRES",
                                    "Other"}
        assert rep.total_gmres == sum(rep.gmres_iterations)
        # per-iteration timings sum to the category totals
        for cat, tot in zip(("Inner solve", "Coarse solve", "GMRES"),
                            np.sum(rep.timing_history, axis=0)):
            assert abs(rep.timings[cat] - tot) < 1e-9

    def test_iteration_limit_reported(self):
        prob, m, dm, dec = diffusion_case()
        cfg = SolverConfig(outer=NewtonParams(rel_tol=1e-14, abs_tol=0.0,
                                              max_iter=1), variant="raspen")
        u, rep = solve_nonlinear_schwarz(prob, m, dm, dec, cfg)
        assert not rep.converged
        assert "limit" in rep.reason

    def test_monotone_decrease_with_line_search(self):
        prob, m, dm, dec = diffusion_case()
        P0 = coarse_space(prob, m, dm, dec)
        cfg = SolverConfig(variant="hybrid")
        u, rep = solve_nonlinear_schwarz(prob, m, dm, dec, cfg, P0=P0)
        assert rep.converged
        assert all(np.diff(rep.residuals) < 0)

    def test_warm_start(self):
        prob, m, dm, dec = diffusion_case()
        cfg = SolverConfig(variant="raspen")
        u, rep = solve_nonlinear_schwarz(prob, m, dm, dec, cfg)
        u2, rep2 = solve_nonlinear_schwarz(prob, m, dm, dec, cfg, u0=u)
        assert rep2.converged
        assert rep2.outer_iterations == 0


class TestNks:
    def test_matches_newton(self):
        prob, m, dm, dec = diffusion_case()
        u_ref = newton_reference(prob, m, dm)
        P0 = coarse_space(prob, m, dm, dec)
        cfg = SolverConfig(outer=NewtonParams(rel_tol=1e-10, abs_tol=1e-12,
                                              max_iter=20),
                           gmres=GmresParams(rel_tol=1e-10, max_iter=400))
        u, rep = solve_nks(prob, m, dm, dec, cfg, P0=P0)
        assert rep.converged
        assert np.abs(u - u_ref).max() < 1e-8

    def test_one_level_works(self):
        prob, m, dm, dec = diffusion_case()
        cfg = SolverConfig()
        u, rep = solve_nks(prob, m, dm, dec, cfg)
        assert rep.converged

    def test_preconditioning_reduces_iterations(self):
        prob, m, dm, dec = diffusion_case()
        P0 = coarse_space(prob, m, dm, dec)
        cfg = SolverConfig(gmres=GmresParams(rel_tol=1e-8, max_iter=500))
        _, rep_prec = solve_nks(prob, m, dm, dec, cfg, P0=P0)
        assert rep_prec.converged
        # the preconditioned counts must be far below the system size
        assert max(rep_prec.gmres_iterations) < dm.n_dofs // 4
