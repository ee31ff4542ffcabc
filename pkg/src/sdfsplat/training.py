"""Interleaved optimization: volume-rendering phases fit the SDF, Gaussian
phases fit/flatten the splats, and each Gaussian block refreshes the
surface-point set that regularizes the SDF.

Schedule: after every `gs_block_interval` SDF iterations a Gaussian block
runs; blocks split `gs_iters_total` exactly.  The learning rate ramps
linearly over the warmup fraction and steps down 10x at the two milestone
fractions (paper ratios preserved under scaling).  SDF parameters use
decoupled weight decay; Gaussian parameters use plain Adam with per-group
learning rates.

Determinism: all random draws happen on the main thread; ray batches are
split into a fixed number of chunks (independent of the worker count) and
chunk gradients are reduced in chunk order, so results are bit-identical
for any `threads`.
"""
from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, asdict

import numpy as np
from threadpoolctl import threadpool_limits

from .autodiff import Tape
from .checkpoint import TrainState, save_checkpoint
from .flatten import loss_scale, loss_align, export_surface_points
from .gaussians import GaussianSet, random_gaussians
from .neus import (LossWeights, NonFiniteLossError, ray_sphere_intersect,
                   render_rays, resample_importance, stratified_t, loss_point)
from .scene import LoadedScene
from .sdf import SdfConfig, SdfNetwork
from .splat import DensifyConfig, densify_and_prune, rasterize


@dataclass
class TrainConfig:
    # schedule (paper-scale 500k/100k/30k, warmup 5k, milestones 300k/400k)
    total_iters: int = 5000
    gs_block_interval: int = 1000
    gs_iters_total: int = 300
    warmup_frac: float = 0.01
    milestone_fracs: tuple = (0.6, 0.8)
    lr_decay: float = 10.0
    # per-iteration sampling (paper samples 1,024 rays; desk sizes keep a
    # 5k-iteration run in tens of minutes on one core)
    rays_per_iter: int = 192
    n_samples: int = 48
    images_per_iter: int = 4
    pt_batch: int = 512
    importance: bool = False
    n_chunks: int = 4
    # loss weights
    lambda1: float = 0.1
    lambda2: float = 1.0
    lambda3: float = 100.0
    lambda4: float = 1.0
    w_curv: float = 5e-4
    curvature: bool = True
    # SDF optimizer
    lr: float = 1e-3
    weight_decay: float = 1e-2
    # SDF network (desk-scale defaults; paper-scale table_size is 2**19)
    levels: int = 8
    features: int = 2
    table_size: int = 2 ** 14
    base_res: int = 16
    max_res: int = 512
    hidden: int = 64
    geo_feat: int = 15
    color_hidden: int = 32
    color_layers: int = 4
    r_init: float = 0.4
    active_levels_init: int = 2
    inv_s_init: float = 20.0
    bg_init: object = "auto"      # "auto" = mean image color, or a float
    # Gaussians
    n_gaussians: int = 300
    sh_degree: int = 1
    lr_pos: float = 2e-3
    lr_pos_final: float = 2e-5
    lr_quat: float = 3e-3
    lr_scale: float = 5e-2
    lr_opacity: float = 5e-2
    lr_sh: float = 2.5e-3
    densify_interval: int = 100
    densify: bool = True
    tau_grad: float = 2e-4
    tau_alpha: float = 0.005
    max_gaussians: int = 2000
    tau_flat: float = 1e-3
    tau_alpha_export: float = 0.5
    seed: int = 0

    def sdf_config(self):
        return SdfConfig(levels=self.levels, features=self.features,
                         table_size=self.table_size, base_res=self.base_res,
                         max_res=self.max_res, hidden=self.hidden,
                         geo_feat=self.geo_feat, color_hidden=self.color_hidden,
                         color_layers=self.color_layers, r_init=self.r_init,
                         active_levels_init=self.active_levels_init)

    def densify_config(self):
        return DensifyConfig(tau_grad=self.tau_grad, tau_alpha=self.tau_alpha,
                             interval=self.densify_interval,
                             max_gaussians=self.max_gaussians)

    def warmup_iters(self):
        return int(round(self.warmup_frac * self.total_iters))

    def milestones(self):
        return tuple(int(round(f * self.total_iters))
                     for f in self.milestone_fracs)


def lr_at(iteration, cfg: TrainConfig):
    """Warmup ramp then stepped decay; `iteration` is the SDF-phase index."""
    warmup = cfg.warmup_iters()
    if warmup > 0 and iteration < warmup:
        return cfg.lr * iteration / warmup
    m1, m2 = cfg.milestones()
    if iteration < m1:
        return cfg.lr
    if iteration < m2:
        return cfg.lr / cfg.lr_decay
    return cfg.lr / (cfg.lr_decay * cfg.lr_decay)


def phase_schedule(cfg: TrainConfig):
    """[('neus', n), ('gaussian', m), ...]; Gaussian counts sum exactly."""
    blocks = []
    remaining = cfg.total_iters
    n_blocks = max(1, -(-cfg.total_iters // cfg.gs_block_interval))
    gs_base = cfg.gs_iters_total // n_blocks
    gs_rem = cfg.gs_iters_total % n_blocks
    b = 0
    while remaining > 0:
        n = min(cfg.gs_block_interval, remaining)
        blocks.append(("neus", n))
        remaining -= n
        g = gs_base + (1 if b < gs_rem else 0)
        if g > 0:
            blocks.append(("gaussian", g))
        b += 1
    return blocks


def adam_step(param, grad, state, lr, weight_decay=0.0,
              betas=(0.9, 0.999), eps=1e-8):
    """One Adam/AdamW update in place; state is (m, v, t).

    Decoupled decay shrinks the parameter before the Adam delta.  Returns
    the updated (m, v, t).
    """
    m, v, t = state
    if not np.all(np.isfinite(grad)):
        raise NonFiniteLossError("NaN/inf gradient in adam_step")
    t += 1
    if weight_decay:
        param *= (1.0 - lr * weight_decay)
    m = betas[0] * m + (1.0 - betas[0]) * grad
    v = betas[1] * v + (1.0 - betas[1]) * grad * grad
    m_hat = m / (1.0 - betas[0] ** t)
    v_hat = v / (1.0 - betas[1] ** t)
    param -= lr * m_hat / (np.sqrt(v_hat) + eps)
    return m, v, t


class Adam:
    """Adam over a named parameter dict with per-name lr and decay rules."""

    def __init__(self, params: dict, lr=1e-3, weight_decay=0.0,
                 betas=(0.9, 0.999), eps=1e-8, decay_exempt=()):
        self.params = params
        self.lr = lr
        self.weight_decay = weight_decay
        self.betas = betas
        self.eps = eps
        self.decay_exempt = set(decay_exempt)
        self.state = {k: [np.zeros_like(v), np.zeros_like(v), 0]
                      for k, v in params.items()}

    def step(self, grads: dict, lr=None, lr_per_name: dict = None):
        base = self.lr if lr is None else lr
        for name, p in self.params.items():
            g = grads.get(name)
            if g is None:
                g = np.zeros_like(p)
            if not np.all(np.isfinite(g)):
                raise NonFiniteLossError(f"NaN/inf gradient for {name!r}")
            group_lr = base if lr_per_name is None else lr_per_name.get(name, base)
            wd = 0.0 if name in self.decay_exempt else self.weight_decay
            st = self.state[name]
            m, v, t = adam_step(p, g, (st[0], st[1], st[2]), group_lr, wd,
                                self.betas, self.eps)
            st[0], st[1], st[2] = m, v, t

    def remap(self, new_params: dict, carry):
        """Re-key state after densify/prune: carry[i] = old row or -1."""
        for name, p in new_params.items():
            old = self.state[name]
            m = np.zeros_like(p)
            v = np.zeros_like(p)
            ok = carry >= 0
            m[ok] = old[0][carry[ok]]
            v[ok] = old[1][carry[ok]]
            self.state[name] = [m, v, old[2]]
        self.params = new_params


@dataclass
class LossReport:
    iteration: int
    phase: str
    l_rgb: float = 0.0
    l_eik: float = 0.0
    l_pt: float = 0.0
    l_curv: float = 0.0
    l_s: float = 0.0
    l_align: float = 0.0
    total: float = 0.0
    lr: float = 0.0
    n_gauss: int = 0
    levels: int = 0

    CSV_HEADER = "iter,phase,l_rgb,l_eik,l_pt,l_curv,l_s,l_align,total,lr,n_gauss,levels"

    def csv_row(self):
        return (f"{self.iteration},{self.phase},{self.l_rgb!r},{self.l_eik!r},"
                f"{self.l_pt!r},{self.l_curv!r},{self.l_s!r},{self.l_align!r},"
                f"{self.total!r},{self.lr!r},{self.n_gauss},{self.levels}")


def loss_gaussian(parts: dict, lambda3, lambda4):
    """L_rgb + lambda3*L_s + lambda4*L_align with a finite guard."""
    from .autodiff import Value
    for name, v in parts.items():
        val = v.data if isinstance(v, Value) else v
        if not np.all(np.isfinite(val)):
            raise NonFiniteLossError(f"loss term {name!r} is not finite")
    return parts["rgb"] + lambda3 * parts["s"] + lambda4 * parts["align"]


@dataclass
class TrainResult:
    state: TrainState
    reports: list
    pt_points: np.ndarray
    cfg: TrainConfig


class GaussianTrainer:
    """Gaussian-phase machinery: photometric + flatten + align steps.

    Usable standalone (against any field providing grad_np) or inside the
    joint loop with the live SDF as the normal prior.
    """

    def __init__(self, gaussians: GaussianSet, cfg: TrainConfig, total_iters):
        self.gaussians = gaussians
        self.cfg = cfg
        self.total_iters = max(1, total_iters)
        self.it = 0
        self.opt = Adam(gaussians.params(), lr=1e-3)
        self.grad_acc = np.zeros(len(gaussians))
        self.grad_cnt = 0

    def _lr_map(self):
        c = self.cfg
        frac = min(1.0, self.it / self.total_iters)
        pos_lr = c.lr_pos * (c.lr_pos_final / c.lr_pos) ** frac
        return {"pos": pos_lr, "quat": c.lr_quat, "log_s": c.lr_scale,
                "opacity_logit": c.lr_opacity, "sh": c.lr_sh}

    def step(self, cam, target_img, field, background, align_eps):
        c = self.cfg
        tape = Tape()
        P = {k: tape.leaf(v) for k, v in self.gaussians.params().items()}
        frame = rasterize(self.gaussians, cam, background, tape=tape, P=P)
        l_rgb = (frame.image_value - tape.constant(target_img)).abs().mean()
        l_s = loss_scale(self.gaussians, tape, P)
        l_align, _ = loss_align(self.gaussians, field, tape, P,
                                stop_sdf=True, grad_eps=align_eps)
        total = loss_gaussian({"rgb": l_rgb, "s": l_s, "align": l_align},
                              c.lambda3, c.lambda4)
        tape.backward(total)
        grads = {k: (np.zeros_like(v.data) if v.grad is None else v.grad)
                 for k, v in P.items()}
        self.opt.step(grads, lr_per_name=self._lr_map())
        self.gaussians.normalize_quats()

        # densification statistics: screen-space positional gradient norms
        gu = np.zeros(len(self.gaussians)) if frame.u_value.grad is None \
            else frame.u_value.grad
        gv = np.zeros(len(self.gaussians)) if frame.v_value.grad is None \
            else frame.v_value.grad
        self.grad_acc += np.sqrt((gu * 2.0 / cam.width) ** 2
                                 + (gv * 2.0 / cam.height) ** 2)
        self.grad_cnt += 1
        self.it += 1

        if c.densify and self.it % c.densify_interval == 0:
            stats = self.grad_acc / max(1, self.grad_cnt)
            new, carry = densify_and_prune(self.gaussians, stats,
                                           c.densify_config())
            self.gaussians = new
            self.opt.remap(new.params(), carry)
            self.grad_acc = np.zeros(len(new))
            self.grad_cnt = 0
        return (float(l_rgb.data), float(l_s.data), float(l_align.data),
                float(total.data))


def _bind_render_leaves(tape, net, log_inv_s, bg_logit):
    P = net.bind(tape)
    lis = tape.leaf(log_inv_s, name="log_inv_s")
    bgl = tape.leaf(bg_logit, name="bg_logit")
    return P, lis, lis.exp(), bgl, bgl.sigmoid()


def _neus_chunk_job(net, log_inv_s, bg_logit, o, d, t, targets, weights,
                    denom_rgb, denom_pts, w_curv_eff):
    """Loss sums + gradients for one ray chunk (sum-form, global denominators)."""
    tape = Tape()
    P, lis, inv_s, bgl, bg = _bind_render_leaves(tape, net, log_inv_s, bg_logit)
    out = render_rays(tape, P, net, o, d, t, inv_s, bg, with_curvature=True)
    rgb_sum = (out["color"] - tape.constant(targets)).abs().sum()
    eik_sum = ((out["grads"].norm(axis=-1) - 1.0) ** 2).sum()
    curv_sum = out["curv"].sum()
    loss = rgb_sum * (1.0 / denom_rgb) \
        + weights.lambda1 * eik_sum * (1.0 / denom_pts)
    if w_curv_eff != 0.0:
        loss = loss + w_curv_eff * curv_sum * (1.0 / denom_pts)
    tape.backward(loss)
    grads = {k: v.grad for k, v in P.items() if v.grad is not None}
    if lis.grad is not None:
        grads["log_inv_s"] = lis.grad
    if bgl.grad is not None:
        grads["bg_logit"] = bgl.grad
    sums = {"rgb": float(rgb_sum.data), "eik": float(eik_sum.data),
            "curv": float(curv_sum.data)}
    return grads, sums


def train(scene: LoadedScene, cfg: TrainConfig, out_dir=None, threads=1,
          log_every=0):
    """Run the interleaved schedule; returns TrainResult.

    With `out_dir`, writes reports.csv and checkpoint.bin there
    (checkpoint written atomically at the end).
    """
    rng = np.random.default_rng(cfg.seed)
    net = SdfNetwork(cfg.sdf_config(), seed=cfg.seed)
    log_inv_s = np.asarray(np.log(cfg.inv_s_init))
    if cfg.bg_init == "auto":
        # start the background at the mean training-image color
        mean_c = np.clip(np.mean([scene.images[i].mean(axis=(0, 1))
                                  for i in scene.train_idx], axis=0),
                         0.02, 0.98)
        bg_logit = np.log(mean_c / (1.0 - mean_c))
    else:
        bg_logit = np.full(3, np.log(cfg.bg_init / (1.0 - cfg.bg_init)))
    weights = LossWeights(lambda1=cfg.lambda1, lambda2=cfg.lambda2,
                          w_curv=cfg.w_curv if cfg.curvature else 0.0)

    sdf_params = dict(net.params)
    sdf_params["log_inv_s"] = log_inv_s
    sdf_params["bg_logit"] = bg_logit
    exempt = {"log_inv_s", "bg_logit"} | {k for k in sdf_params
                                          if k.startswith(("b", "cb"))}
    sdf_opt = Adam(sdf_params, lr=cfg.lr, weight_decay=cfg.weight_decay,
                   decay_exempt=exempt)

    if scene.points is not None and len(scene.points):
        gaussians = _gaussians_from_points(scene.points, rng, cfg)
    else:
        gaussians = random_gaussians(cfg.n_gaussians, rng,
                                     sh_degree=cfg.sh_degree)
    g_trainer = GaussianTrainer(gaussians, cfg, cfg.gs_iters_total)

    pt_points = scene.points if scene.points is not None else np.empty((0, 3))
    train_cams = [scene.cameras[i] for i in scene.train_idx]
    train_imgs = [scene.images[i] for i in scene.train_idx]

    act_interval = max(1, int(round(cfg.total_iters / (2 * cfg.levels))))
    schedule = phase_schedule(cfg)
    reports = []
    csv_file = None
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        csv_file = open(os.path.join(out_dir, "reports.csv"), "w")
        csv_file.write(LossReport.CSV_HEADER + "\n")

    # our matrices are small enough that multi-threaded BLAS loses to its own
    # overhead; parallelism happens at the ray-chunk level instead
    blas_guard = threadpool_limits(limits=1)
    pool = ThreadPoolExecutor(max_workers=threads) if threads > 1 else None
    neus_it = 0
    global_it = 0
    try:
        for phase, count in schedule:
            for _ in range(count):
                if phase == "neus":
                    target_active = min(cfg.levels, cfg.active_levels_init
                                        + neus_it // act_interval)
                    while net.active_levels < target_active:
                        net.activate_level(net.active_levels)
                    rep = _neus_iteration(
                        scene, train_cams, train_imgs, net, sdf_opt, log_inv_s,
                        bg_logit, pt_points, weights, cfg, rng, neus_it, pool)
                    rep.iteration = global_it
                    rep.n_gauss = len(g_trainer.gaussians)
                    neus_it += 1
                else:
                    view = int(rng.integers(len(train_cams)))
                    bg_now = 1.0 / (1.0 + np.exp(-bg_logit))
                    l_rgb, l_s, l_align, total = g_trainer.step(
                        train_cams[view], train_imgs[view], net, bg_now,
                        net.grad_eps())
                    rep = LossReport(
                        iteration=global_it, phase="gaussian", l_rgb=l_rgb,
                        l_s=l_s, l_align=l_align, total=total,
                        lr=g_trainer._lr_map()["pos"],
                        n_gauss=len(g_trainer.gaussians),
                        levels=net.active_levels)
                reports.append(rep)
                if csv_file:
                    csv_file.write(rep.csv_row() + "\n")
                if log_every and global_it % log_every == 0:
                    print(f"[{rep.iteration:6d}] {rep.phase:8s} "
                          f"total={rep.total:.5f} rgb={rep.l_rgb:.5f}")
                global_it += 1
            if phase == "gaussian":
                pt_points = export_surface_points(
                    g_trainer.gaussians, cfg.tau_alpha_export, cfg.tau_flat,
                    extra_points=scene.points)
    finally:
        blas_guard.unregister()
        if pool is not None:
            pool.shutdown()
        if csv_file:
            csv_file.close()

    state = TrainState(net=net, gaussians=g_trainer.gaussians,
                       log_inv_s=sdf_params["log_inv_s"], bg_logit=bg_logit,
                       iteration=global_it, train_config=asdict(cfg))
    if out_dir:
        save_checkpoint(os.path.join(out_dir, "checkpoint.bin"), state)
    return TrainResult(state=state, reports=reports, pt_points=pt_points,
                       cfg=cfg)


def _gaussians_from_points(points, rng, cfg: TrainConfig):
    n = len(points)
    g = random_gaussians(n, rng, sh_degree=cfg.sh_degree)
    g.pos = np.asarray(points, float).copy()
    return g


def _neus_iteration(scene, cams, imgs, net, sdf_opt, log_inv_s, bg_logit,
                    pt_points, weights, cfg, rng, neus_it, pool):
    n_views = min(cfg.images_per_iter, len(cams))
    views = rng.choice(len(cams), size=n_views, replace=False)
    per = np.full(n_views, cfg.rays_per_iter // n_views)
    per[:cfg.rays_per_iter % n_views] += 1

    o_all, d_all, tg_all = [], [], []
    for v, m in zip(views, per):
        cam = cams[v]
        us = rng.integers(0, cam.width, m)
        vs = rng.integers(0, cam.height, m)
        o, d = cam.ray(us + 0.5, vs + 0.5)
        o_all.append(o)
        d_all.append(d)
        tg_all.append(imgs[v][vs, us])
    o = np.concatenate(o_all)
    d = np.concatenate(d_all)
    targets = np.concatenate(tg_all)

    t0, t1, hit = ray_sphere_intersect(o, d)
    B_total = len(o)
    hit_idx = np.nonzero(hit)[0]
    t = stratified_t(t0[hit], t1[hit], cfg.n_samples, rng)
    if cfg.importance and len(hit_idx):
        coarse_w = _coarse_weights(net, log_inv_s, o[hit], d[hit], t)
        t = resample_importance(t, coarse_w, cfg.n_samples, rng)

    lr = lr_at(neus_it, cfg)
    w_curv_eff = (weights.w_curv * lr / cfg.lr) if cfg.curvature else 0.0
    denom_rgb = 3.0 * B_total
    denom_pts = max(1, len(hit_idx) * cfg.n_samples)

    chunks = np.array_split(np.arange(len(hit_idx)), cfg.n_chunks)
    chunks = [c for c in chunks if len(c)]
    jobs = [(o[hit_idx[c]], d[hit_idx[c]], t[c], targets[hit_idx[c]])
            for c in chunks]

    def run(job):
        oc, dc, tc, tgc = job
        return _neus_chunk_job(net, log_inv_s, bg_logit, oc, dc, tc, tgc,
                               weights, denom_rgb, denom_pts, w_curv_eff)

    results = list(pool.map(run, jobs)) if pool is not None \
        else [run(j) for j in jobs]

    # background-only rays (missed the sphere)
    miss_idx = np.nonzero(~hit)[0]
    sums = {"rgb": 0.0, "eik": 0.0, "curv": 0.0}
    grads = {}
    if len(miss_idx):
        tape = Tape()
        bgl = tape.leaf(bg_logit, name="bg_logit")
        bg = bgl.sigmoid()
        diff = (tape.constant(np.ones((len(miss_idx), 1))) * bg.reshape(1, 3)
                - tape.constant(targets[miss_idx])).abs().sum()
        loss_mb = diff * (1.0 / denom_rgb)
        tape.backward(loss_mb)
        sums["rgb"] += float(diff.data)
        if bgl.grad is not None:
            grads["bg_logit"] = bgl.grad.copy()

    for g, s in results:
        for k, v in g.items():
            if k in grads:
                grads[k] = grads[k] + v
            else:
                grads[k] = v.copy()
        for k in ("rgb", "eik", "curv"):
            sums[k] += s[k]

    # surface-point loss on its own small tape
    l_pt_val, n_used = 0.0, 0
    if len(pt_points) and cfg.lambda2 != 0.0:
        take = min(cfg.pt_batch, len(pt_points))
        sel = rng.choice(len(pt_points), size=take, replace=False)
        tape = Tape()
        P = net.bind(tape)
        lp, n_used = loss_point(net, pt_points[sel], tape, P)
        if n_used:
            tape.backward(lp * weights.lambda2)
            for k, v in P.items():
                if v.grad is not None:
                    if k in grads:
                        grads[k] = grads[k] + v.grad
                    else:
                        grads[k] = v.grad.copy()
            l_pt_val = float(lp.data)

    sdf_opt.step(grads, lr=lr)

    l_rgb = sums["rgb"] / denom_rgb
    l_eik = sums["eik"] / denom_pts
    l_curv = sums["curv"] / denom_pts
    total = l_rgb + weights.lambda1 * l_eik + weights.lambda2 * l_pt_val \
        + w_curv_eff * l_curv
    return LossReport(iteration=0, phase="neus", l_rgb=l_rgb, l_eik=l_eik,
                      l_pt=l_pt_val, l_curv=l_curv, total=total, lr=lr,
                      levels=net.active_levels)


def _coarse_weights(net, log_inv_s, o, d, t):
    """Blend weights of a coarse pass (no gradients; importance sampling)."""
    tape = Tape()
    P = {k: tape.constant(v) for k, v in net.params.items()}
    from .neus import sdf_to_alpha, composite_weights
    pts = o[:, None, :] + t[:, :, None] * d[:, None, :]
    f, _ = net.sdf_head(tape, P, pts.reshape(-1, 3))
    f = f.data.reshape(t.shape)
    alpha = sdf_to_alpha(f[:, :-1], f[:, 1:], float(np.exp(log_inv_s)))
    w, _ = composite_weights(alpha)
    return w
