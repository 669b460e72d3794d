// Entry point: login-free rater name prompt, then the rating loop.

import { ApiClient } from "./api.js";
import { createApp } from "./app.js";

const RATER_KEY = "rating-ui.rater-id";

function askRaterId(container: HTMLElement, onReady: (raterId: string) => void): void {
  const stored = window.localStorage.getItem(RATER_KEY);
  if (stored) {
    onReady(stored);
    return;
  }
  container.innerHTML = `
    <form id="name-form" class="name-form">
      <label>Your name <input id="rater-name" type="text" required></label>
      <button type="submit">Start rating</button>
    </form>
  `;
  const form = container.querySelector<HTMLFormElement>("#name-form")!;
  form.addEventListener("submit", (ev) => {
    ev.preventDefault();
    const name = container.querySelector<HTMLInputElement>("#rater-name")!.value.trim();
    if (!name) return;
    window.localStorage.setItem(RATER_KEY, name);
    onReady(name);
  });
}

const root = document.getElementById("app");
if (root) {
  askRaterId(root, (raterId) => {
    const app = createApp(root, new ApiClient(), { raterId });
    void app.loadNext();
  });
}
