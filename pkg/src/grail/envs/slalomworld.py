"""Downhill slalom: steer the skier through every gate of a course.

The skier stays at a fixed height while gates (pairs of flags) scroll up.
Orientation sets the lateral speed; each turn action shifts it one step. A
course counts as a goal when all of its gates were passed. The full variant
charges a per-frame cost, penalizes misses and adds trees to crash into.
"""

from __future__ import annotations

from ..errors import EnvError
from .base import ORIENTATIONS, Env, Object, per_object_status, world_status


class SlalomWorld(Env):
    status_predicates = ("left_oriented", "right_oriented", "straight_oriented", "true")

    def _check_layout(self):
        p = self.spec.params
        lo, hi = p["gate_x_range"]
        if not p["half_gap"] <= lo < hi <= self.spec.width - p["half_gap"]:
            raise EnvError("gate centres must keep both flags inside the frame")
        if p["gates_per_course"] < 1 or p["gate_spacing"] <= 0:
            raise EnvError("a course needs at least one gate and positive spacing")

    # ------------------------------------------------------------ dynamics

    def _reset_state(self):
        p = self.spec.params
        self.x = float(p["start_x"])
        self.orientation = "straight"
        self.gates = []  # [centre x, y, course id, last of course]
        self.course = 0
        self.course_missed = False
        self._new_course(p["skier_y"] + p["first_gate_offset"])
        self.trees = []
        self.tree_timer = int(p["tree_period"])

    def _new_course(self, y0):
        p = self.spec.params
        lo, hi = p["gate_x_range"]
        prev = self.gates[-1][0] if self.gates else self.x
        n = int(p["gates_per_course"])
        for k in range(n):
            cx = float(self.rng.uniform(max(lo, prev - p["max_shift"]),
                                        min(hi, prev + p["max_shift"])))
            self.gates.append([cx, y0 + k * p["gate_spacing"], self.course, k == n - 1])
            prev = cx
        self.course += 1

    def _frame(self, action):
        p = self.spec.params
        full = self.spec.hazards
        reward, events = 0.0, []
        i = ORIENTATIONS.index(self.orientation)
        if action == "left_to_flag":
            i = max(i - 1, 0)
        elif action == "right_to_flag":
            i = min(i + 1, 2)
        self.orientation = ORIENTATIONS[i]
        m = p["margin"]
        self.x = min(max(self.x + (i - 1) * p["ski_speed"], m), self.spec.width - m)

        sy = p["skier_y"]
        for g in self.gates:
            before = g[1]
            g[1] -= p["scroll_speed"]
            if before > sy >= g[1]:
                if abs(self.x - g[0]) < p["half_gap"]:
                    events.append("gate")
                else:
                    events.append("miss")
                    self.course_missed = True
                    if full:
                        reward -= p["miss_penalty"]
                if g[3]:
                    if not self.course_missed:
                        events.append("goal")
                        reward += p["goal_reward_full"] if full else p["goal_reward"]
                    self.course_missed = False
                    self._new_course(self.gates[-1][1] + p["gate_spacing"])
        self.gates = [g for g in self.gates if g[1] >= -p["half_gap"]]

        if full:
            reward -= p["frame_cost"]
            self._move_trees()
            r = p["hit_radius"]
            for t in self.trees:
                if not t[2] and abs(t[0] - self.x) < r and abs(t[1] - sy) < r:
                    t[2] = True
                    events.append("crash")
                    reward -= p["crash_penalty"]
                    self.orientation = "straight"
        return reward, events, False

    def _move_trees(self):
        p = self.spec.params
        for t in self.trees:
            t[1] -= p["scroll_speed"]
        self.trees = [t for t in self.trees if t[1] >= 0]
        self.tree_timer -= 1
        if self.tree_timer <= 0 and len(self.trees) < self.spec.slots.get("tree", 0):
            self.tree_timer = int(p["tree_period"])
            x = float(self.rng.uniform(p["margin"], self.spec.width - p["margin"]))
            self.trees.append([x, float(self.spec.height), False])

    # ------------------------------------------------------------ observation

    def _objects(self):
        p = self.spec.params
        objs = [Object("agent", self.x, float(p["skier_y"]), orientation=self.orientation)]
        H = self.spec.height
        for g in self.gates:
            if 0 <= g[1] <= H:
                objs.append(Object("flag", g[0] - p["half_gap"], g[1]))
                objs.append(Object("flag", g[0] + p["half_gap"], g[1]))
        if self.spec.hazards:
            objs += [Object("tree", t[0], t[1]) for t in self.trees]
        return objs

    def _info(self):
        return {"orientation": self.orientation}

    @staticmethod
    def status_fns():
        def oriented(name):
            return per_object_status("agent", lambda s, o: o.orientation == name)
        return {
            "left_oriented": oriented("left"),
            "right_oriented": oriented("right"),
            "straight_oriented": oriented("straight"),
            "true": world_status(lambda s: True),
        }

    # ------------------------------------------------------------ scripted policy

    def scripted_action(self):
        """Steer towards the centre of the next gate below the skier."""
        p = self.spec.params
        upcoming = [g for g in self.gates if g[1] > p["skier_y"]]
        target = upcoming[0][0] if upcoming else self.x
        deadband = p["ski_speed"] * self.spec.action_repeat
        want = 1
        if target - self.x > deadband:
            want = 2
        elif self.x - target > deadband:
            want = 0
        have = ORIENTATIONS.index(self.orientation)
        if want > have:
            return self.actions.index("right_to_flag")
        if want < have:
            return self.actions.index("left_to_flag")
        return self.actions.index("noop")
