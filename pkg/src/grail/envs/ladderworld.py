"""Platforms joined by ladders; reach the child on the top platform.

The agent walks along a platform and climbs the ladder of its level. A climb
starts with ``up_ladder`` while the agent stands within ``align_tol`` of the
ladder and then runs to the next platform on its own, ignoring further input.
The full variant adds monkeys climbing up and down fixed columns and coconuts
dropping onto the bottom one; touching either costs a life.
"""

from __future__ import annotations

import math

from ..errors import EnvError
from .base import Env, Object, world_status


class LadderWorld(Env):
    status_predicates = ("nothing_around",)

    def _check_layout(self):
        p = self.spec.params
        n = len(p["levels_y"])
        if n < 2 or len(p["ladder_x"]) != n:
            raise EnvError("ladderworld needs >= 2 levels and one ladder per level")
        if any(b >= a for a, b in zip(p["levels_y"], p["levels_y"][1:])):
            raise EnvError("levels_y must decrease upwards")
        if p["top_y"] >= p["levels_y"][-1]:
            raise EnvError("top_y must lie above the highest level")
        W = self.spec.width
        for x in [p["start_x"], *p["ladder_x"]]:
            if not p["margin"] <= x <= W - p["margin"]:
                raise EnvError(f"x={x} outside the walkable range")

    # ------------------------------------------------------------ dynamics

    def _reset_state(self):
        p = self.spec.params
        self.lives = int(p["lives"])
        self._respawn()
        self.monkeys = []
        self.coconut = None
        self.coconut_timer = int(p["coconut_period"])
        if self.spec.hazards:
            lo, hi = p["monkey_range_y"]
            for i, mx in enumerate(p["monkey_x"]):
                y = lo + self.rng.uniform(0, hi - lo)
                self.monkeys.append([float(mx), y, 1.0 if i % 2 == 0 else -1.0])

    def _respawn(self):
        p = self.spec.params
        self.x = float(p["start_x"])
        self.level = 0
        self.y = float(p["levels_y"][0])
        self.climbing = False

    def _ladder_y(self, level):
        p = self.spec.params
        return float(p["levels_y"][level])

    def _level_y(self, level):
        p = self.spec.params
        return float(p["levels_y"][level] if level < len(p["levels_y"]) else p["top_y"])

    def _frame(self, action):
        p = self.spec.params
        full = self.spec.hazards
        reward, events = 0.0, []
        if not self.climbing:
            if action == "right_ladder":
                self.x = min(self.x + p["speed"], self.spec.width - p["margin"])
            elif action == "left_ladder":
                self.x = max(self.x - p["speed"], p["margin"])
            elif action == "up_ladder":
                lx = p["ladder_x"][self.level]
                if abs(self.x - lx) <= p["align_tol"]:
                    self.climbing = True
                    self.x = float(lx)
        if self.climbing:
            target = self._level_y(self.level + 1)
            self.y = max(self.y - p["climb_speed"], target)
            if self.y <= target:
                self.climbing = False
                self.level += 1
                if self.level == len(p["levels_y"]):
                    events.append("goal")
                    reward += p["goal_reward_full"] if full else p["goal_reward"]
                    self._respawn()
                else:
                    events.append("climb")
                    if full:
                        reward += p["minor_reward"]
        if full:
            self._move_hazards()
            if self._touching_hazard():
                events.append("hit")
                self.lives -= 1
                self._respawn()
                if self.lives <= 0:
                    return reward, events, True
        return reward, events, False

    def _move_hazards(self):
        p = self.spec.params
        lo, hi = p["monkey_range_y"]
        for m in self.monkeys:
            m[1] += m[2] * p["monkey_speed"]
            if m[1] <= lo or m[1] >= hi:
                m[1] = min(max(m[1], lo), hi)
                m[2] = -m[2]
        if self.coconut is None:
            self.coconut_timer -= 1
            if self.coconut_timer <= 0:
                lo, hi = p["coconut_range"]
                self.coconut = [lo + self.rng.uniform(0, hi - lo),
                                self._level_y(0) - p["coconut_drop"]]
        else:
            self.coconut[1] += p["coconut_speed"]
            if self.coconut[1] > self._level_y(0):
                self.coconut = None
                self.coconut_timer = int(p["coconut_period"])

    def _touching_hazard(self):
        r = self.spec.params["hit_radius"]
        hazards = [m[:2] for m in self.monkeys]
        if self.coconut is not None:
            hazards.append(self.coconut)
        return any(abs(self.x - hx) < r and abs(self.y - hy) < r for hx, hy in hazards)

    # ------------------------------------------------------------ observation

    def _objects(self):
        p = self.spec.params
        objs = [Object("agent", self.x, self.y)]
        for level, lx in enumerate(p["ladder_x"]):
            objs.append(Object("ladder", float(lx), self._ladder_y(level)))
        objs.append(Object("child", float(p["ladder_x"][-1]), float(p["top_y"])))
        if self.spec.hazards:
            for m in self.monkeys:
                objs.append(Object("monkey", m[0], m[1]))
            if self.coconut is not None:
                objs.append(Object("coconut", self.coconut[0], self.coconut[1]))
        return objs

    def _info(self):
        return {"level": self.level, "lives": getattr(self, "lives", 0),
                "climbing": self.climbing}

    @staticmethod
    def status_fns():
        return {"nothing_around": world_status(_nothing_around)}

    # ------------------------------------------------------------ scripted policy

    def scripted_action(self):
        """Walk to the ladder of the current level, then climb.

        Waits (``up_ladder`` away from a ladder does nothing) or backs off
        while a hazard is about to cross the path.
        """
        p = self.spec.params
        act = self.actions.index
        lx = p["ladder_x"][self.level]
        if self.climbing or abs(self.x - lx) <= p["align_tol"]:
            return act("up_ladder")
        step = p["speed"] if self.x < lx else -p["speed"]
        toward = "right_ladder" if step > 0 else "left_ladder"
        if not self._danger(self.x + step):
            return act(toward)
        if not self._danger(self.x):
            return act("up_ladder")
        return act("left_ladder" if step > 0 else "right_ladder")

    def _danger(self, x):
        reach = self.spec.params["hit_radius"] + 2 * self.spec.params["speed"]
        hazards = [m[:2] for m in self.monkeys]
        if self.coconut is not None:
            hazards.append(self.coconut)
        return any(abs(x - hx) < reach and abs(self.y - hy) < reach + 16 for hx, hy in hazards)


HAZARD_RADIUS = 32.0


def _nothing_around(scene):
    agent = scene.agent
    for o in scene.objects:
        if o.type in ("monkey", "coconut") and o.visible:
            if math.hypot(o.x - agent.x, o.y - agent.y) < HAZARD_RADIUS:
                return False
    return True
