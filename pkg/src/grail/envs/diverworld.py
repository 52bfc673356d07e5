"""Underwater rescue: collect six divers, then surface before oxygen runs out.

Divers swim across fixed lanes. Each lane spawns its next diver after a
seeded random delay, entering from a random side; a diver is visible once it
is inside the frame. The full variant adds enemies in the lanes and missiles;
touching either costs a life.
"""

from __future__ import annotations

from ..errors import EnvError
from .base import Env, Object, per_object_status, world_status

OXYGEN_LOW = 0.25

MOVES = {
    "up_air": (0, -1),
    "up_rescue": (0, -1),
    "up_to_diver": (0, -1),
    "down_to_diver": (0, 1),
    "left_to_diver": (-1, 0),
    "right_to_diver": (1, 0),
}


class DiverWorld(Env):
    status_predicates = ("oxygen_low", "full_divers", "not_full_divers", "visible_diver")

    def _check_layout(self):
        p = self.spec.params
        if not p["surface_y"] < min(p["lanes_y"]) <= max(p["lanes_y"]) <= p["seabed_y"]:
            raise EnvError("lanes must lie between the surface and the seabed")
        if p["max_divers"] < 1 or p["oxygen_frames"] <= 0:
            raise EnvError("max_divers and oxygen_frames must be positive")
        unknown = set(self.spec.actions) - set(MOVES)
        if unknown:
            raise EnvError(f"diverworld has no actions named {sorted(unknown)}")
        if len(p["lanes_y"]) > self.spec.slots.get("diver", 0):
            raise EnvError("one diver slot per lane is required")

    # ------------------------------------------------------------ dynamics

    def _reset_state(self):
        p = self.spec.params
        self.lives = int(p["lives"])
        self.carried = 0
        self._respawn()
        n = len(p["lanes_y"])
        self.divers = [None] * n
        self.diver_timer = [self._delay("diver") for _ in range(n)]
        self.enemies = [None] * n
        self.enemy_timer = [self._delay("enemy") for _ in range(n)]
        self.missiles = []
        self.missile_timer = int(p["missile_period"])

    def _respawn(self):
        p = self.spec.params
        self.x, self.y = float(p["start_x"]), float(p["surface_y"])
        self.oxygen = 1.0

    def _delay(self, kind):
        lo, hi = self.spec.params[f"{kind}_delay"]
        return int(self.rng.integers(lo, hi + 1))

    def _spawn_mover(self, lane, speed):
        p = self.spec.params
        direction = 1.0 if self.rng.random() < 0.5 else -1.0
        x = -p["spawn_offset"] if direction > 0 else self.spec.width + p["spawn_offset"]
        return [x, float(p["lanes_y"][lane]), direction * speed]

    def _advance(self, movers, timers, kind, speed):
        """Move lane objects; spawn after the timer, drop them off the far side."""
        W, off = self.spec.width, self.spec.params["spawn_offset"]
        for lane, m in enumerate(movers):
            if m is None:
                timers[lane] -= 1
                if timers[lane] <= 0:
                    movers[lane] = self._spawn_mover(lane, speed)
                continue
            m[0] += m[2]
            if m[0] < -off - 1 or m[0] > W + off + 1:
                movers[lane] = None
                timers[lane] = self._delay(kind)

    def _frame(self, action):
        p = self.spec.params
        full = self.spec.hazards
        reward, events = 0.0, []
        mx, my = MOVES[action]
        m = p["margin"]
        self.x = min(max(self.x + mx * p["speed"], m), self.spec.width - m)
        self.y = min(max(self.y + my * p["speed"], p["surface_y"]), p["seabed_y"])

        self._advance(self.divers, self.diver_timer, "diver", p["diver_speed"])
        r = p["collect_radius"]
        for lane, d in enumerate(self.divers):
            if d is None or not self._on_screen(d[0]) or self.carried >= p["max_divers"]:
                continue
            if abs(d[0] - self.x) < r and abs(d[1] - self.y) < r:
                self.carried += 1
                self.divers[lane] = None
                self.diver_timer[lane] = self._delay("diver")
                events.append("diver")
                if full:
                    reward += p["minor_reward"]

        if self.y <= p["surface_y"]:
            self.oxygen = 1.0
            if self.carried >= p["max_divers"]:
                self.carried = 0
                events.append("goal")
                reward += p["goal_reward_full"] if full else p["goal_reward"]
        else:
            self.oxygen = max(0.0, self.oxygen - 1.0 / p["oxygen_frames"])

        lost = self.oxygen <= 0.0
        if full:
            self._advance(self.enemies, self.enemy_timer, "enemy", p["enemy_speed"])
            self._move_missiles()
            hr = p["hit_radius"]
            hazards = [e for e in self.enemies if e is not None] + self.missiles
            if any(abs(h[0] - self.x) < hr and abs(h[1] - self.y) < hr for h in hazards):
                lost = True
        if lost:
            events.append("life_lost")
            self.lives -= 1
            self.carried = 0
            self._respawn()
            if self.lives <= 0:
                return reward, events, True
        return reward, events, False

    def _move_missiles(self):
        p = self.spec.params
        W = self.spec.width
        self.missiles = [mv for mv in self.missiles if -1 <= mv[0] + mv[2] <= W + 1]
        for mv in self.missiles:
            mv[0] += mv[2]
        self.missile_timer -= 1
        if self.missile_timer <= 0 and len(self.missiles) < self.spec.slots.get("missile", 0):
            lane = int(self.rng.integers(len(p["lanes_y"])))
            mv = self._spawn_mover(lane, p["missile_speed"])
            mv[0] = 0.0 if mv[2] > 0 else W
            self.missiles.append(mv)
            self.missile_timer = int(p["missile_period"])

    def _threat(self):
        """Nearest enemy or missile heading for the agent's lane, if close."""
        p = self.spec.params
        reach = p["hit_radius"] + 12
        for h in [e for e in self.enemies if e is not None] + self.missiles:
            gap = (self.x - h[0]) * (1 if h[2] > 0 else -1)
            if abs(h[1] - self.y) < reach and -reach < gap < 56:
                return h
        return None

    def _on_screen(self, x):
        return 0.0 <= x <= self.spec.width

    # ------------------------------------------------------------ observation

    def _objects(self):
        p = self.spec.params
        objs = [Object("agent", self.x, self.y),
                Object("oxygen_bar", float(p["oxygen_bar_xy"][0]), float(p["oxygen_bar_xy"][1]))]
        for d in self.divers:
            if d is not None:
                objs.append(Object("diver", d[0], d[1], visible=self._on_screen(d[0])))
        if self.spec.hazards:
            for e in self.enemies:
                if e is not None and self._on_screen(e[0]):
                    objs.append(Object("enemy", e[0], e[1]))
            for mv in self.missiles:
                objs.append(Object("missile", mv[0], mv[1]))
        return objs

    def _info(self):
        return {"oxygen": self.oxygen, "carried": self.carried,
                "max_divers": self.spec.params["max_divers"], "lives": self.lives}

    @staticmethod
    def status_fns():
        def full(scene):
            return scene.info["carried"] >= scene.info["max_divers"]
        return {
            "oxygen_low": per_object_status("oxygen_bar",
                                            lambda s, o: s.info["oxygen"] < OXYGEN_LOW),
            "full_divers": world_status(full),
            "not_full_divers": world_status(lambda s: not full(s)),
            "visible_diver": per_object_status("diver", lambda s, o: o.visible),
        }

    # ------------------------------------------------------------ scripted policy

    def scripted_action(self):
        """Surface when full or short of air, otherwise chase the nearest diver."""
        p = self.spec.params
        act = self.actions.index
        threat = self._threat()
        if threat is not None:
            return act("up_to_diver" if threat[1] >= self.y else "down_to_diver")
        if self.carried >= p["max_divers"]:
            return act("up_rescue")
        if self.oxygen < OXYGEN_LOW:
            return act("up_air")
        visible = [d for d in self.divers if d is not None and self._on_screen(d[0])]
        if not visible:
            if self.y < p["lanes_y"][0]:
                return act("down_to_diver")
            return act("right_to_diver" if self.x < self.spec.width / 2 else "left_to_diver")
        d = min(visible, key=lambda d: abs(d[0] - self.x) + abs(d[1] - self.y))
        if abs(d[1] - self.y) > p["speed"]:
            return act("down_to_diver" if d[1] > self.y else "up_to_diver")
        return act("right_to_diver" if d[0] > self.x else "left_to_diver")
