/** DOM-free queue/session state: cursor movement, decisions, server sync.
 *
 * Every POST corresponds to one explicit user action and an item is shown as
 * decided only after the server acknowledges it; a failed POST leaves the
 * item pending and surfaces the error instead.
 */
export const KEY_BINDINGS = {
    "1": "G1",
    "2": "G2",
    "0": "reject_both",
    n: "skip",
};
export class QueueController {
    constructor(api, onChange = () => { }) {
        this.api = api;
        this.onChange = onChange;
        this.items = [];
        this.cursor = 0;
        this.decidedCount = 0;
        this.total = 0;
        this.counts = { G1: 0, G2: 0, reject_both: 0 };
        this.busy = false;
        this.stale = false;
        this.error = null;
        this.retryDelayMs = 500;
    }
    view() {
        return {
            items: this.items.slice(),
            cursor: this.cursor,
            decidedCount: this.decidedCount,
            total: this.total,
            counts: { ...this.counts },
            busy: this.busy,
            stale: this.stale,
            error: this.error,
        };
    }
    current() {
        return this.items[this.cursor] ?? null;
    }
    isDone() {
        return this.items.length === 0 && this.total > 0;
    }
    /** Initial load or full resync; reconciles the cursor onto the same item. */
    async load() {
        const focused = this.current()?.id;
        const snapshot = await this.api.fetchQueue();
        this.items = snapshot.pending.slice();
        this.total = snapshot.total;
        this.decidedCount = snapshot.decided;
        const idx = focused ? this.items.findIndex((item) => item.id === focused) : -1;
        this.cursor = idx >= 0 ? idx : Math.min(this.cursor, Math.max(this.items.length - 1, 0));
        this.stale = false;
        this.error = null;
        this.retryDelayMs = 500;
        this.onChange();
    }
    /** Background sync with exponential backoff; marks the view stale on failure. */
    async sync() {
        try {
            await this.load();
            return true;
        }
        catch {
            this.stale = true;
            this.retryDelayMs = Math.min(this.retryDelayMs * 2, 30_000);
            this.onChange();
            return false;
        }
    }
    nextRetryDelay() {
        return this.retryDelayMs;
    }
    skip() {
        if (this.items.length === 0)
            return;
        this.cursor = (this.cursor + 1) % this.items.length;
        this.onChange();
    }
    /** Send one decision for the focused item; resolves true once acknowledged. */
    async decide(choice, reviewer, note = "") {
        const item = this.current();
        if (item === null || this.busy) {
            return false;
        }
        this.busy = true;
        this.error = null;
        this.onChange();
        try {
            await this.api.postDecision(item.id, choice, reviewer, note);
        }
        catch (err) {
            this.busy = false;
            this.error = err instanceof Error ? err.message : String(err);
            this.onChange();
            return false;
        }
        // acknowledged: only now does the item leave the pending list
        this.items.splice(this.cursor, 1);
        this.decidedCount += 1;
        this.counts[choice] += 1;
        if (this.cursor >= this.items.length) {
            this.cursor = 0;
        }
        this.busy = false;
        this.onChange();
        return true;
    }
    /** Route a keypress; returns true when it triggered an action. */
    async handleKey(key, reviewer) {
        const action = KEY_BINDINGS[key];
        if (action === undefined) {
            return false;
        }
        if (action === "skip") {
            this.skip();
            return true;
        }
        return this.decide(action, reviewer);
    }
}
