// Single-page rating view: image + heatmap overlay, rubric, 1-5 control.

import { ApiClient, RatingTask, ValidationError } from "./api.js";

const RATING_LEVELS = [1, 2, 3, 4, 5] as const;

export interface AppOptions {
  raterId: string;
}

export class RatingApp {
  private task: RatingTask | null = null;
  private submitting = false;

  private readonly overlayImg: HTMLImageElement;
  private readonly baseImg: HTMLImageElement;
  private readonly toggleBtn: HTMLButtonElement;
  private readonly rubricList: HTMLOListElement;
  private readonly form: HTMLFormElement;
  private readonly submitBtn: HTMLButtonElement;
  private readonly progressEl: HTMLElement;
  private readonly banner: HTMLElement;
  private readonly doneEl: HTMLElement;
  private readonly taskPane: HTMLElement;

  constructor(
    private readonly root: HTMLElement,
    private readonly client: ApiClient,
    private readonly opts: AppOptions,
  ) {
    root.innerHTML = `
      <header>
        <h1>Prototype heatmap rating</h1>
        <span id="progress" aria-live="polite"></span>
      </header>
      <div id="banner" class="banner" hidden></div>
      <main id="task-pane" hidden>
        <figure class="viewer">
          <img id="base-image" alt="image without overlay" hidden>
          <img id="overlay-image" alt="image with activation overlay">
          <figcaption>
            <button id="toggle-overlay" type="button">Hide overlay</button>
          </figcaption>
        </figure>
        <section class="rubric">
          <h2>Rating rubric</h2>
          <ol id="rubric-list" reversed></ol>
        </section>
        <form id="rating-form">
          <fieldset id="rating-choices">
            ${RATING_LEVELS.map(
              (v) => `
              <label><input type="radio" name="rating" value="${v}"> ${v}</label>`,
            ).join("")}
          </fieldset>
          <button id="submit" type="submit" disabled>Submit rating</button>
        </form>
      </main>
      <section id="done" hidden>
        <h2>All done</h2>
        <p id="done-count"></p>
      </section>
    `;
    this.overlayImg = this.query("#overlay-image");
    this.baseImg = this.query("#base-image");
    this.toggleBtn = this.query("#toggle-overlay");
    this.rubricList = this.query("#rubric-list");
    this.form = this.query("#rating-form");
    this.submitBtn = this.query("#submit");
    this.progressEl = this.query("#progress");
    this.banner = this.query("#banner");
    this.doneEl = this.query("#done");
    this.taskPane = this.query("#task-pane");

    this.toggleBtn.addEventListener("click", () => this.toggleOverlay());
    this.form.addEventListener("change", () => this.syncSubmitState());
    this.form.addEventListener("submit", (ev) => {
      ev.preventDefault();
      void this.submit();
    });
  }

  private query<T extends HTMLElement>(selector: string): T {
    const el = this.root.querySelector(selector);
    if (!el) throw new Error(`missing element ${selector}`);
    return el as T;
  }

  selectedRating(): number | null {
    const checked = this.root.querySelector<HTMLInputElement>(
      'input[name="rating"]:checked',
    );
    if (!checked) return null;
    const value = Number(checked.value);
    return Number.isInteger(value) && value >= 1 && value <= 5 ? value : null;
  }

  private syncSubmitState(): void {
    this.submitBtn.disabled = this.submitting || this.selectedRating() === null;
  }

  private toggleOverlay(): void {
    const showingOverlay = !this.overlayImg.hidden;
    this.overlayImg.hidden = showingOverlay;
    this.baseImg.hidden = !showingOverlay;
    this.toggleBtn.textContent = showingOverlay ? "Show overlay" : "Hide overlay";
  }

  private showBanner(text: string, kind: "error" | "notice", retry?: () => void): void {
    this.banner.hidden = false;
    this.banner.className = `banner ${kind}`;
    this.banner.textContent = text;
    if (retry) {
      const btn = document.createElement("button");
      btn.id = "retry";
      btn.type = "button";
      btn.textContent = "Retry";
      btn.addEventListener("click", () => {
        this.clearBanner();
        retry();
      });
      this.banner.append(" ", btn);
    }
  }

  private clearBanner(): void {
    this.banner.hidden = true;
    this.banner.textContent = "";
  }

  async refreshProgress(): Promise<void> {
    try {
      const p = await this.client.progress();
      this.progressEl.textContent = `${p.rated} of ${p.total} rated`;
    } catch {
      this.progressEl.textContent = "";
    }
  }

  /** Fetch the next task and render it; shows the done state on exhaustion. */
  async loadNext(): Promise<void> {
    this.clearBanner();
    let task: RatingTask | null;
    try {
      task = await this.client.nextTask(this.opts.raterId);
    } catch {
      this.showBanner("Could not reach the rating service.", "error", () => {
        void this.loadNext();
      });
      return;
    }
    await this.refreshProgress();
    if (task === null) {
      this.task = null;
      this.taskPane.hidden = true;
      this.doneEl.hidden = false;
      const mine = await this.client.progress().catch(() => null);
      const count = mine?.per_rater?.[this.opts.raterId] ?? 0;
      this.query("#done-count").textContent = `You rated ${count} heatmaps. Thank you.`;
      return;
    }
    this.task = task;
    this.doneEl.hidden = true;
    this.taskPane.hidden = false;
    this.overlayImg.src = task.heatmap_url;
    this.overlayImg.hidden = false;
    this.baseImg.src = task.image_url;
    this.baseImg.hidden = true;
    this.toggleBtn.textContent = "Hide overlay";
    this.rubricList.innerHTML = "";
    for (const level of [...RATING_LEVELS].reverse()) {
      const li = document.createElement("li");
      li.value = level;
      li.textContent = task.rubric[String(level)] ?? "";
      this.rubricList.append(li);
    }
    this.form.reset();
    this.syncSubmitState();
  }

  /** Submit the selected rating; advances on ack or on already-rated. */
  async submit(): Promise<void> {
    const rating = this.selectedRating();
    if (this.task === null || rating === null || this.submitting) return;
    this.submitting = true;
    this.syncSubmitState();
    try {
      const outcome = await this.client.submitRating(this.task, rating, this.opts.raterId);
      if (outcome === "duplicate") {
        this.showBanner("Already rated; moving on.", "notice");
      }
      await this.loadNext();
    } catch (err) {
      if (err instanceof ValidationError) {
        this.showBanner(`Rating rejected: ${err.message}`, "error");
      } else {
        this.showBanner("Submission failed; your rating was not saved.", "error", () => {
          void this.submit();
        });
      }
    } finally {
      this.submitting = false;
      this.syncSubmitState();
    }
  }
}

export function createApp(root: HTMLElement, client: ApiClient, opts: AppOptions): RatingApp {
  return new RatingApp(root, client, opts);
}
