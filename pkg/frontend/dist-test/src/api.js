/** Types and HTTP client for the review-queue JSON API. */
export class HttpReviewApi {
    constructor(base = "") {
        this.base = base;
    }
    async fetchQueue() {
        const resp = await fetch(`${this.base}/api/queue`);
        if (!resp.ok) {
            throw new Error(`queue fetch failed: ${resp.status}`);
        }
        return (await resp.json());
    }
    async postDecision(id, choice, reviewer, note = "") {
        const resp = await fetch(`${this.base}/api/decision`, {
            method: "POST",
            headers: { "Content-Type": "application/json" },
            body: JSON.stringify({ id, choice, reviewer, note }),
        });
        if (!resp.ok) {
            let detail = `${resp.status}`;
            try {
                const body = (await resp.json());
                if (body.error)
                    detail = body.error;
            }
            catch {
                // non-JSON error body; keep the status code
            }
            throw new Error(`decision rejected: ${detail}`);
        }
    }
}
