"""Jit-compiled inner loops for the beam-lattice simulator.

Everything here operates on flat float64 arrays so numba can cache the
compiled kernels. Forces between beam endpoints are accumulated as exact
plus/minus pairs, so internal dynamics conserve linear momentum to
rounding error. fastmath stays off: runs must be bit-reproducible.
"""

import math

from numba import njit


@njit(cache=True, inline="always")
def _quat_mul(aw, ax, ay, az, bw, bx, by, bz):
    return (
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    )


@njit(cache=True, inline="always")
def _pick(cx, cy, cz, idx):
    if idx == 0:
        return cx
    if idx == 1:
        return cy
    return cz


@njit(cache=True)
def rest_length(base, amplitude, phase, angular_freq, t):
    """Actuated rest length at time t; passive beams keep the base length."""
    if amplitude == 0.0:
        return base
    return base * (1.0 + amplitude * math.sin(angular_freq * t + phase))


@njit(cache=True)
def run_steps(
    pos, vel, quat, angvel, force, torque,
    mass, inv_mass, inv_inertia,
    beam_i, beam_j, beam_axis,
    k_ax, k_lat, k_cpl, k_b4, k_b2, k_tor,
    damp_tr_unit, damp_rot_unit, amplitude, phase,
    mu_static, mu_dynamic,
    voxel_size, angular_freq, gravity, zeta, global_damping,
    ground_on, ground_k, contact_radius, stick_speed,
    dt, step0, n_steps, actuate,
):
    """Advance n_steps of semi-implicit Euler in place.

    Time is derived from the integer step counter, never accumulated, so
    chunked calls reproduce a single long call bit-for-bit.
    """
    n = pos.shape[0]
    m = beam_i.shape[0]
    decay = 1.0 - global_damping * dt
    for s in range(n_steps):
        t = (step0 + s) * dt

        for a in range(n):
            force[a, 0] = 0.0
            force[a, 1] = 0.0
            force[a, 2] = -gravity * mass[a]
            torque[a, 0] = 0.0
            torque[a, 1] = 0.0
            torque[a, 2] = 0.0

        for b in range(m):
            i = beam_i[b]
            j = beam_j[b]
            ax = beam_axis[b]
            a1 = (ax + 1) % 3
            a2 = (ax + 2) % 3
            rest = rest_length(voxel_size, amplitude[b], phase[b], angular_freq, t) \
                if actuate else voxel_size

            # beam frame rides on node i; local x lies along lattice axis ax
            qw = quat[i, 0]
            qx = quat[i, 1]
            qy = quat[i, 2]
            qz = quat[i, 3]
            r00 = 1.0 - 2.0 * (qy * qy + qz * qz)
            r01 = 2.0 * (qx * qy - qw * qz)
            r02 = 2.0 * (qx * qz + qw * qy)
            r10 = 2.0 * (qx * qy + qw * qz)
            r11 = 1.0 - 2.0 * (qx * qx + qz * qz)
            r12 = 2.0 * (qy * qz - qw * qx)
            r20 = 2.0 * (qx * qz - qw * qy)
            r21 = 2.0 * (qy * qz + qw * qx)
            r22 = 1.0 - 2.0 * (qx * qx + qy * qy)
            e0x = _pick(r00, r01, r02, ax)
            e0y = _pick(r10, r11, r12, ax)
            e0z = _pick(r20, r21, r22, ax)
            e1x = _pick(r00, r01, r02, a1)
            e1y = _pick(r10, r11, r12, a1)
            e1z = _pick(r20, r21, r22, a1)
            e2x = _pick(r00, r01, r02, a2)
            e2y = _pick(r10, r11, r12, a2)
            e2z = _pick(r20, r21, r22, a2)

            dx = pos[j, 0] - pos[i, 0]
            dy = pos[j, 1] - pos[i, 1]
            dz = pos[j, 2] - pos[i, 2]
            delta = e0x * dx + e0y * dy + e0z * dz - rest
            v = e1x * dx + e1y * dy + e1z * dz
            w = e2x * dx + e2y * dy + e2z * dz

            # relative orientation of j in i's body axes, as a rotation vector
            rw, rx, ry, rz = _quat_mul(
                qw, -qx, -qy, -qz, quat[j, 0], quat[j, 1], quat[j, 2], quat[j, 3]
            )
            if rw < 0.0:
                rw = -rw
                rx = -rx
                ry = -ry
                rz = -rz
            sin_half = math.sqrt(rx * rx + ry * ry + rz * rz)
            if sin_half < 1e-12:
                tvx = 2.0 * rx
                tvy = 2.0 * ry
                tvz = 2.0 * rz
            else:
                scale = 2.0 * math.atan2(sin_half, rw) / sin_half
                tvx = rx * scale
                tvy = ry * scale
                tvz = rz * scale
            thx = _pick(tvx, tvy, tvz, ax)
            thy = _pick(tvx, tvy, tvz, a1)
            thz = _pick(tvx, tvy, tvz, a2)

            # Euler-Bernoulli end loads in the beam frame
            fj0 = -k_ax[b] * delta
            fj1 = -(k_lat[b] * v - k_cpl[b] * thz)
            fj2 = -(k_lat[b] * w + k_cpl[b] * thy)
            mj0 = -k_tor[b] * thx
            mj1 = -(k_cpl[b] * w + k_b4[b] * thy)
            mj2 = -(-k_cpl[b] * v + k_b4[b] * thz)
            mi0 = k_tor[b] * thx
            mi1 = -(k_cpl[b] * w + k_b2[b] * thy)
            mi2 = -(-k_cpl[b] * v + k_b2[b] * thz)

            fjx = e0x * fj0 + e1x * fj1 + e2x * fj2
            fjy = e0y * fj0 + e1y * fj1 + e2y * fj2
            fjz = e0z * fj0 + e1z * fj1 + e2z * fj2

            # critically damped relative motion; equal and opposite pairs
            c_tr = zeta * damp_tr_unit[b]
            fjx += -c_tr * (vel[j, 0] - vel[i, 0])
            fjy += -c_tr * (vel[j, 1] - vel[i, 1])
            fjz += -c_tr * (vel[j, 2] - vel[i, 2])

            force[j, 0] += fjx
            force[j, 1] += fjy
            force[j, 2] += fjz
            force[i, 0] -= fjx
            force[i, 1] -= fjy
            force[i, 2] -= fjz

            c_rot = zeta * damp_rot_unit[b]
            dwx = -c_rot * (angvel[j, 0] - angvel[i, 0])
            dwy = -c_rot * (angvel[j, 1] - angvel[i, 1])
            dwz = -c_rot * (angvel[j, 2] - angvel[i, 2])
            torque[j, 0] += e0x * mj0 + e1x * mj1 + e2x * mj2 + dwx
            torque[j, 1] += e0y * mj0 + e1y * mj1 + e2y * mj2 + dwy
            torque[j, 2] += e0z * mj0 + e1z * mj1 + e2z * mj2 + dwz
            torque[i, 0] += e0x * mi0 + e1x * mi1 + e2x * mi2 - dwx
            torque[i, 1] += e0y * mi0 + e1y * mi1 + e2y * mi2 - dwy
            torque[i, 2] += e0z * mi0 + e1z * mi1 + e2z * mi2 - dwz

        if ground_on:
            for a in range(n):
                pen = contact_radius - pos[a, 2]
                if pen <= 0.0:
                    continue
                normal = ground_k * pen - 2.0 * math.sqrt(ground_k * mass[a]) * vel[a, 2]
                if normal < 0.0:
                    normal = 0.0
                force[a, 2] += normal
                ftx = force[a, 0]
                fty = force[a, 1]
                vtx = vel[a, 0]
                vty = vel[a, 1]
                vt = math.sqrt(vtx * vtx + vty * vty)
                if vt < stick_speed:
                    # force that would arrest the node this step
                    sx = -ftx - mass[a] * vtx / dt
                    sy = -fty - mass[a] * vty / dt
                    smag = math.sqrt(sx * sx + sy * sy)
                    if smag <= mu_static[a] * normal:
                        force[a, 0] += sx
                        force[a, 1] += sy
                    else:
                        ftmag = math.sqrt(ftx * ftx + fty * fty)
                        if ftmag > 0.0:
                            fd = mu_dynamic[a] * normal / ftmag
                            force[a, 0] -= fd * ftx
                            force[a, 1] -= fd * fty
                else:
                    fd = mu_dynamic[a] * normal / vt
                    force[a, 0] -= fd * vtx
                    force[a, 1] -= fd * vty

        for a in range(n):
            vel[a, 0] = (vel[a, 0] + dt * force[a, 0] * inv_mass[a]) * decay
            vel[a, 1] = (vel[a, 1] + dt * force[a, 1] * inv_mass[a]) * decay
            vel[a, 2] = (vel[a, 2] + dt * force[a, 2] * inv_mass[a]) * decay
            pos[a, 0] += dt * vel[a, 0]
            pos[a, 1] += dt * vel[a, 1]
            pos[a, 2] += dt * vel[a, 2]
            # cube inertia is isotropic, so no gyroscopic term survives
            angvel[a, 0] = (angvel[a, 0] + dt * torque[a, 0] * inv_inertia[a]) * decay
            angvel[a, 1] = (angvel[a, 1] + dt * torque[a, 1] * inv_inertia[a]) * decay
            angvel[a, 2] = (angvel[a, 2] + dt * torque[a, 2] * inv_inertia[a]) * decay
            qw = quat[a, 0]
            qx = quat[a, 1]
            qy = quat[a, 2]
            qz = quat[a, 3]
            dw, dx_, dy_, dz_ = _quat_mul(
                0.0, angvel[a, 0], angvel[a, 1], angvel[a, 2], qw, qx, qy, qz
            )
            qw += 0.5 * dt * dw
            qx += 0.5 * dt * dx_
            qy += 0.5 * dt * dy_
            qz += 0.5 * dt * dz_
            norm = math.sqrt(qw * qw + qx * qx + qy * qy + qz * qz)
            if norm > 0.0 and math.isfinite(norm):
                quat[a, 0] = qw / norm
                quat[a, 1] = qx / norm
                quat[a, 2] = qy / norm
                quat[a, 3] = qz / norm
            else:
                # degenerate only when diverging; caller checks positions
                quat[a, 0] = 1.0
                quat[a, 1] = 0.0
                quat[a, 2] = 0.0
                quat[a, 3] = 0.0
